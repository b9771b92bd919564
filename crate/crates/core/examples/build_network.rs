//! Loads the bundled feeder, prints its sensitivity summary, then builds a
//! three-bus toy network from text.

use voltvar::grid::{Grid, GridNetwork};

fn main() -> voltvar::Result<()> {
    let grid = Grid::ucsd49();
    let net = &grid.net;
    println!("{}: {} buses, {} lines", net.name(), net.bus_count(), net.lines().len());
    println!("Z_base = {:.3} ohm, controllable buses {:?}", net.z_base(), net.controllable());
    println!("||X_cc|| = {:.4} p.u.", grid.mat.x_norm);

    let toy = GridNetwork::parse(
        "name = toy\nbase_kv = 12.47\nbase_mva = 10\ncontrollable = [2]\n[lines]\n0 1 0.5 1.0\n1 2 0.4 0.8\n",
    )?;
    let toy = Grid::new(toy)?;
    // X is the shared-path reactance, so X_22 is the sum of both lines
    println!("toy X (p.u.):\n{:.5}", toy.mat.x);
    Ok(())
}
