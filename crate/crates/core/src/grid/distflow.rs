//! Nonlinear DistFlow solved by backward-forward sweep.

use nalgebra::DVector;

use super::matrices::BusIndex;
use super::network::GridNetwork;
use super::scenario::PowerScenario;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// Stop when the largest voltage-magnitude update is below this (p.u.).
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Magnitudes below this abort the solve as a collapse.
    pub collapse_threshold: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_sweeps: 200, collapse_threshold: 0.5 }
    }
}

/// Converged DistFlow state. `p_flow[b]`/`q_flow[b]` are the flows on the line
/// feeding bus `b` (index 0 unused).
#[derive(Debug, Clone)]
pub struct DistFlowSolution {
    pub v: DVector<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub sweeps: usize,
}

pub fn solve_distflow(net: &GridNetwork, scen: &PowerScenario, q_c: &DVector<f64>) -> Result<DVector<f64>> {
    solve_distflow_with(net, scen, q_c, SweepOptions::default()).map(|s| s.v)
}

pub fn solve_distflow_with(
    net: &GridNetwork,
    scen: &PowerScenario,
    q_c: &DVector<f64>,
    opts: SweepOptions,
) -> Result<DistFlowSolution> {
    let index = BusIndex::new(net);
    scen.check(&index)?;
    let q = index.assemble_q(&scen.q_uncontrolled, q_c)?;
    let nb = net.bus_count();
    let z = net.z_base();
    let mut r = vec![0.0; nb];
    let mut x = vec![0.0; nb];
    let mut par = vec![0usize; nb];
    for b in 1..nb {
        let (p, k) = net.parent(b).expect("tree");
        par[b] = p;
        r[b] = net.lines()[k].r_ohm / z;
        x[b] = net.lines()[k].x_ohm / z;
    }

    // flat start
    let mut v2 = vec![1.0; nb];
    let mut vmag = vec![1.0; nb];
    let mut pf = vec![0.0; nb];
    let mut qf = vec![0.0; nb];
    let order = net.bfs_order();

    let mut last_delta = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        // backward: accumulate downstream demand plus series losses
        for &b in order.iter().rev() {
            if b == 0 {
                continue;
            }
            let (mut ps, mut qs) = (0.0, 0.0);
            for &c in net.children(b) {
                ps += pf[c];
                qs += qf[c];
            }
            let loss = (pf[b] * pf[b] + qf[b] * qf[b]) / v2[par[b]];
            pf[b] = ps - scen.p[b - 1] + r[b] * loss;
            qf[b] = qs - q[b - 1] + x[b] * loss;
        }
        // forward: squared-voltage drop along each line
        let mut delta: f64 = 0.0;
        for &b in order.iter().skip(1) {
            let m = par[b];
            let s2 = pf[b] * pf[b] + qf[b] * qf[b];
            let next = v2[m] - 2.0 * (r[b] * pf[b] + x[b] * qf[b]) + (r[b] * r[b] + x[b] * x[b]) * s2 / v2[m];
            if !next.is_finite() || next < opts.collapse_threshold * opts.collapse_threshold {
                return Err(Error::Collapse { bus: b, magnitude: next.max(0.0).sqrt() });
            }
            v2[b] = next;
            let mag = next.sqrt();
            delta = delta.max((mag - vmag[b]).abs());
            vmag[b] = mag;
        }
        last_delta = delta;
        if delta < opts.tolerance {
            return Ok(DistFlowSolution {
                v: DVector::from_iterator(nb - 1, vmag[1..].iter().copied()),
                p_flow: pf,
                q_flow: qf,
                sweeps: sweep,
            });
        }
    }
    Err(Error::Divergence { sweeps: opts.max_sweeps, last_delta })
}
