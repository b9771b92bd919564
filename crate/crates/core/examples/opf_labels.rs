//! Solves the reactive-power OPF for a few points of a synthetic day and
//! checks each solution's KKT residual and restart agreement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voltvar::controller::ReactiveBox;
use voltvar::grid::Grid;
use voltvar::learn::{synthetic_days, ProfileConfig};
use voltvar::opf::{CostWeights, OpfOptions, OpfProblem};

fn main() -> voltvar::Result<()> {
    let grid = Grid::ucsd49();
    let bx = ReactiveBox::ucsd49(grid.net.base_mva());
    let w = CostWeights::standard(&grid.mat);
    let day = synthetic_days(&grid.net, &bx, &ProfileConfig { days: 1, ..ProfileConfig::default() })?.remove(0);
    let opts = OpfOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    println!("point  objective   kkt       iters  restart gap  q* (MVar, first 4)");
    for scen in day.iter().step_by(16) {
        let prob = OpfProblem::new(&grid.mat, scen, &bx, &w, None)?;
        let sol = prob.solve(&opts)?;
        let other = prob.solve_from(&bx.sample(&mut rng), &opts)?;
        let mvar: Vec<String> = sol.q_star.iter().take(4).map(|q| format!("{:+.3}", q * grid.net.base_mva())).collect();
        println!(
            "{:<6} {:.4e}  {:.1e}  {:>5}  {:.1e}      {}",
            scen.label,
            sol.objective,
            sol.kkt_residual,
            sol.iterations,
            (&sol.q_star - &other.q_star).amax(),
            mvar.join(" ")
        );
    }
    Ok(())
}
