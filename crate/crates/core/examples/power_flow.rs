//! Compares LinDistFlow with the nonlinear DistFlow sweep on one synthetic
//! operating point, and shows the gap shrinking quadratically as injections
//! are halved.

use nalgebra::DVector;
use voltvar::controller::ReactiveBox;
use voltvar::grid::{solve_distflow, Grid};
use voltvar::learn::{synthetic_days, ProfileConfig};

fn main() -> voltvar::Result<()> {
    let grid = Grid::ucsd49();
    let bx = ReactiveBox::ucsd49(grid.net.base_mva());
    let days = synthetic_days(&grid.net, &bx, &ProfileConfig { days: 1, ..ProfileConfig::default() })?;
    let noon = &days[0][48];
    let q_c = DVector::zeros(grid.index().controllable().len());

    let lin = grid.mat.solve_lindistflow(noon, &q_c)?;
    let nl = solve_distflow(&grid.net, noon, &q_c)?;
    println!("bus   linear    distflow");
    for bus in [1, 12, 24, 35, 48] {
        println!("{bus:>3}  {:.5}  {:.5}", lin[bus - 1], nl[bus - 1]);
    }

    let mut prev = None;
    for k in 0..4 {
        let a = 0.5f64.powi(k);
        let s = noon.scaled(a);
        let gap = (grid.mat.solve_lindistflow(&s, &q_c)? - solve_distflow(&grid.net, &s, &q_c)?).amax();
        match prev {
            Some(p) => println!("scale {a:<6} gap {gap:.3e}  ratio {:.2}", p / gap),
            None => println!("scale {a:<6} gap {gap:.3e}"),
        }
        prev = Some(gap);
    }
    Ok(())
}
