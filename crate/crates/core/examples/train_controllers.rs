//! Generates OPF labels, trains one bundle per communication setup with the
//! certifiable Lipschitz cap, and saves the certified bundles.
//!
//! Usage: cargo run --release --example train_controllers [out_dir]

use voltvar::controller::{CommSetup, ReactiveBox};
use voltvar::grid::Grid;
use voltvar::icnn::IcnnConfig;
use voltvar::learn::{default_train_config, evaluate, fit_bundle, generate_dataset, synthetic_days, DatasetConfig, ProfileConfig};
use voltvar::opf::CostWeights;
use voltvar::verify::{certify_bundle, CertifyOptions};

fn main() -> voltvar::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "bundles".into());
    let grid = Grid::ucsd49();
    let bx = ReactiveBox::ucsd49(grid.net.base_mva());
    let w = CostWeights::standard(&grid.mat);
    let days = synthetic_days(&grid.net, &bx, &ProfileConfig::default())?;
    let data = generate_dataset(&grid, &days, &bx, &w, &DatasetConfig::default())?;
    println!("{} samples, {} held out", data.len(), data.validation.len());

    // a smaller network than the default keeps this example quick
    let icnn = IcnnConfig { hidden: vec![32, 32], ..IcnnConfig::default() };
    let cfg = default_train_config(grid.mat.x_norm);
    let c = grid.index().controllable().to_vec();
    for setup in CommSetup::ALL {
        let (mut b, hist) = fit_bundle(setup.label(), &c, setup.partition(&c)?, &bx, 0.1, &icnn, &data, &cfg)?;
        let cert = certify_bundle(&mut b, &grid.mat, &CertifyOptions { monotonicity_pairs: 20_000, ..CertifyOptions::default() })?;
        let val = evaluate(&b, data.validation_samples())?;
        let path = b.save(format!("{out}/{}", setup.label()), grid.net.base_mva())?;
        println!(
            "{:<5} {} models  train {:.3e}  held-out {:.3e}  L {:.2}  eps bound {:.3}  certified {}  -> {}",
            setup.label(),
            b.models().len(),
            hist.last().map_or(f64::NAN, |h| h.train_mse),
            val.mse,
            cert.l_analytic,
            cert.eps_bound,
            cert.ok,
            path.display()
        );
    }
    Ok(())
}
