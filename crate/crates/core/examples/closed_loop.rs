//! Runs the incremental closed loop with a droop policy and prints the
//! Lyapunov function along the trajectory, once inside the certified stepsize
//! bound and once with a stepsize large enough to make the loop oscillate.

use nalgebra::{DMatrix, DVector};
use voltvar::controller::{max_stable_stepsize, ReactiveBox};
use voltvar::grid::{Grid, PowerFlowModel};
use voltvar::learn::{synthetic_days, ProfileConfig};
use voltvar::sim::{find_equilibrium, run_episode, LinearPolicy, SimConfig};
use voltvar::verify::lyapunov_audit;

fn main() -> voltvar::Result<()> {
    let grid = Grid::ucsd49();
    let bx = ReactiveBox::ucsd49(grid.net.base_mva());
    let scen = synthetic_days(&grid.net, &bx, &ProfileConfig { days: 1, ..ProfileConfig::default() })?[0][52].clone();
    let d = bx.len();

    let gain = 30.0;
    let bound = max_stable_stepsize(gain, grid.mat.x_norm);
    println!("droop gain {gain}: stepsize bound {bound:.4}");

    // the bound is sufficient, not necessary; with a scalar gain the linear
    // loop only goes unstable past 2 / (1 + gain·λ_max(X_cc)) ≈ 0.11
    for eps in [0.9 * bound, 0.15] {
        let policy = LinearPolicy::new(DMatrix::identity(d, d) * gain, DVector::from_element(d, 1.0), bx.clone(), eps)?;
        let eq = find_equilibrium(&grid, &policy, &scen)?;
        let cfg = SimConfig { steps: 60, pf_model: PowerFlowModel::Linear, track_lyapunov: true, ..SimConfig::default() };
        let tr = run_episode(&grid, &policy, &scen, &DVector::zeros(d), &cfg)?;
        let dvals = tr.lyapunov().unwrap_or_default();
        let shown: Vec<String> = dvals.iter().step_by(10).map(|v| format!("{v:.2e}")).collect();
        let audit = lyapunov_audit(&tr);
        println!("eps {eps:.4}: D(t) every 10 steps [{}]", shown.join(", "));
        println!(
            "  monotone {}  terminal |v - v*| = {:.2e}",
            audit.monotone,
            (grid.index().gather_controllable(&tr.last().v) - &eq.v_star).amax()
        );
    }
    Ok(())
}
