//! Trains a no-communication and a full-communication bundle on the default
//! synthetic history and compares them on the held-out day, with and without
//! measurement noise.

use voltvar::controller::{CommSetup, ReactiveBox};
use voltvar::grid::Grid;
use voltvar::icnn::IcnnConfig;
use voltvar::learn::{default_train_config, fit_bundle, generate_dataset, synthetic_days, DatasetConfig, ProfileConfig};
use voltvar::opf::CostWeights;
use voltvar::sim::{run_day, NoiseConfig, SimConfig};

fn main() -> voltvar::Result<()> {
    let grid = Grid::ucsd49();
    let bx = ReactiveBox::ucsd49(grid.net.base_mva());
    let w = CostWeights::standard(&grid.mat);
    let days = synthetic_days(&grid.net, &bx, &ProfileConfig::default())?;
    let data = generate_dataset(&grid, &days, &bx, &w, &DatasetConfig::default())?;
    let held_out = days.last().expect("at least one day");

    let icnn = IcnnConfig { hidden: vec![32, 32], ..IcnnConfig::default() };
    let cfg = default_train_config(grid.mat.x_norm);
    let c = grid.index().controllable().to_vec();

    println!("{:<7} {:>9} {:>9} {:>8} {:>12}", "", "volt", "loss", "total", "improvement");
    let mut printed_refs = false;
    for setup in [CommSetup::NoComm, CommSetup::Full] {
        let (b, _) = fit_bundle(setup.label(), &c, setup.partition(&c)?, &bx, 0.1, &icnn, &data, &cfg)?;
        let r = run_day(&grid, &b, setup.label(), held_out, &SimConfig::default())?;
        for row in r.table() {
            if row.name == setup.label() || !printed_refs {
                println!("{:<7} {:>9.4} {:>9.4} {:>8.4} {:>11.1}%", row.name, row.cost_volt, row.cost_loss, row.total, row.improvement_pct);
            }
        }
        printed_refs = true;
        for d_v in [0.005, 0.01] {
            let noisy = SimConfig { noise: NoiseConfig { d_v, d_q: 0.0 }, opf_reference: false, ..SimConfig::default() };
            let t = run_day(&grid, &b, setup.label(), held_out, &noisy)?.controller_total.total();
            println!("  with {:.1}% measurement noise: {t:.4}", 100.0 * d_v);
        }
    }
    Ok(())
}
