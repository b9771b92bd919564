//! Stability checks: sampled monotonicity with per-bus budgets, stepsize
//! certification and Lyapunov audits of simulated traces.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{max_stable_stepsize, Certification, ControllerBundle};
use crate::error::{Error, Result};
use crate::grid::SensitivityMatrices;
use crate::sim::SimTrace;

pub const MONOTONICITY_TOL: f64 = 1e-9;
pub const LYAPUNOV_FLOOR: f64 = 1e-12;
const CHUNKS: usize = 64;

/// Outcome of sampling `s = (φ_raw(v) − φ_raw(v'))ᵀ(v − v')` over random pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub pairs: usize,
    pub region: [f64; 2],
    pub violations: usize,
    /// Largest `s` seen; nonpositive for a monotone bundle.
    pub worst_value: f64,
    /// Pairs where at least one per-bus budget term was positive.
    pub pairs_with_positive_budget: usize,
    /// Per bus: how many pairs gave that bus a positive budget term.
    pub positive_budget_counts: Vec<usize>,
    /// Per bus: the largest budget term seen.
    pub max_budget: Vec<f64>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Default, Clone)]
struct Partial {
    pairs: usize,
    violations: usize,
    worst: f64,
    with_positive: usize,
    counts: Vec<usize>,
    max_budget: Vec<f64>,
}

impl Partial {
    fn new(d: usize) -> Self {
        Self { worst: f64::NEG_INFINITY, counts: vec![0; d], max_budget: vec![f64::NEG_INFINITY; d], ..Self::default() }
    }

    fn merge(mut self, o: Partial) -> Self {
        self.pairs += o.pairs;
        self.violations += o.violations;
        self.worst = self.worst.max(o.worst);
        self.with_positive += o.with_positive;
        for (a, b) in self.counts.iter_mut().zip(o.counts) {
            *a += b;
        }
        for (a, b) in self.max_budget.iter_mut().zip(o.max_budget) {
            *a = a.max(b);
        }
        self
    }
}

fn sample_pairs<F>(d: usize, n_pairs: usize, seed: u64, draw: F) -> Result<Partial>
where
    F: Fn(&mut ChaCha8Rng) -> Result<(DVector<f64>, DVector<f64>)> + Sync,
{
    (0..CHUNKS)
        .into_par_iter()
        .map(|c| -> Result<Partial> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut p = Partial::new(d);
            let count = n_pairs / CHUNKS + usize::from(c < n_pairs % CHUNKS);
            for _ in 0..count {
                let (ds, budgets) = draw(&mut rng)?;
                let s = ds.sum();
                p.pairs += 1;
                p.worst = p.worst.max(s);
                if s > MONOTONICITY_TOL {
                    p.violations += 1;
                }
                let mut any = false;
                for (i, &b) in budgets.iter().enumerate() {
                    p.max_budget[i] = p.max_budget[i].max(b);
                    if b > MONOTONICITY_TOL {
                        p.counts[i] += 1;
                        any = true;
                    }
                }
                p.with_positive += usize::from(any);
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()
        .map(|parts| parts.into_iter().fold(Partial::new(d), Partial::merge))
}

fn report(p: Partial, region: [f64; 2]) -> MonotonicityReport {
    MonotonicityReport {
        pairs: p.pairs,
        region,
        violations: p.violations,
        worst_value: p.worst,
        pairs_with_positive_budget: p.with_positive,
        positive_budget_counts: p.counts,
        max_budget: p.max_budget,
    }
}

/// Samples `n_pairs` independent pairs uniformly in `region^{|𝒞|}`. The result
/// depends on `seed` only, not on the thread count.
pub fn check_monotonicity(bundle: &ControllerBundle, n_pairs: usize, region: [f64; 2], seed: u64) -> Result<MonotonicityReport> {
    let [lo, hi] = region;
    if !(lo < hi) {
        return Err(Error::Precondition("region must have lo < hi".into()));
    }
    let d = bundle.dim();
    let p = sample_pairs(d, n_pairs, seed, |rng| {
        let v = DVector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
        let w = DVector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
        let b = bundle.budgets(&v, &w)?;
        Ok((b.clone(), b))
    })?;
    Ok(report(p, region))
}

/// Per-bus variant: each pair differs in a single coordinate, so `s` is that
/// bus's own term `(φ_i(v) − φ_i(v'))(v_i − v'_i)` plus nothing else. Zero
/// violations means every `φ_i` is nonincreasing in its own voltage.
pub fn check_per_bus_monotonicity(bundle: &ControllerBundle, n_pairs: usize, region: [f64; 2], seed: u64) -> Result<MonotonicityReport> {
    let [lo, hi] = region;
    if !(lo < hi) {
        return Err(Error::Precondition("region must have lo < hi".into()));
    }
    let d = bundle.dim();
    let p = sample_pairs(d, n_pairs, seed, |rng| {
        let v = DVector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
        let i = rng.gen_range(0..d);
        let mut w = v.clone();
        w[i] = rng.gen_range(lo..=hi);
        let b = bundle.budgets(&v, &w)?;
        let mut own = DVector::zeros(d);
        own[i] = b[i];
        Ok((own, b))
    })?;
    Ok(report(p, region))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyOptions {
    pub monotonicity_pairs: usize,
    pub lipschitz_samples: usize,
    pub safety_factor: f64,
    pub region: [f64; 2],
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { monotonicity_pairs: 100_000, lipschitz_samples: 10_000, safety_factor: 0.9, region: [0.9, 1.1], seed: 0 }
    }
}

/// Monotonicity, structural convexity and the stepsize rule
/// `ε ≤ safety · min(1, 2/(1 + L²‖X_𝒞𝒞‖²))` with `L` the larger of the
/// analytic and sampled estimates. The result is stored in the bundle.
pub fn certify_bundle(bundle: &mut ControllerBundle, mat: &SensitivityMatrices, opts: &CertifyOptions) -> Result<Certification> {
    if mat.x_cc.nrows() != bundle.dim() {
        return Err(Error::Dimension(format!(
            "network has {} controllable buses, bundle has {}",
            mat.x_cc.nrows(),
            bundle.dim()
        )));
    }
    let [lo, hi] = opts.region;
    let mut reasons = Vec::new();
    for (k, m) in bundle.models().iter().enumerate() {
        if !m.is_convex_by_construction() {
            reasons.push(format!("model {k} has negative W_z entries"));
        }
    }
    let mono = check_monotonicity(bundle, opts.monotonicity_pairs, opts.region, opts.seed)?;
    if !mono.passed() {
        reasons.push(format!(
            "{} of {} pairs violate monotonicity (worst {:e})",
            mono.violations, mono.pairs, mono.worst_value
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let est = bundle.estimate_lipschitz(lo, hi, opts.lipschitz_samples, &mut rng)?;
    if est.sampled > est.analytic * (1.0 + 1e-9) {
        reasons.push(format!("sampled Lipschitz {} exceeds the analytic bound {}", est.sampled, est.analytic));
    }
    let l = est.analytic.max(est.sampled);
    let bound = max_stable_stepsize(l, mat.x_norm);
    let eps = bundle.epsilon();
    if eps > opts.safety_factor * bound {
        reasons.push(format!(
            "epsilon {eps} exceeds {} x stepsize bound {bound:.6}",
            opts.safety_factor
        ));
    }
    let cert = Certification {
        ok: reasons.is_empty(),
        l_analytic: est.analytic,
        l_sampled: est.sampled,
        x_norm: mat.x_norm,
        eps_bound: bound,
        eps_used: eps,
        safety_factor: opts.safety_factor,
        region: opts.region,
        monotonicity_pairs: mono.pairs,
        monotonicity_violations: mono.violations,
        reasons,
    };
    bundle.set_cached_lipschitz(l);
    bundle.set_certification(cert.clone());
    Ok(cert)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovAudit {
    /// False when the trace carries no Lyapunov column.
    pub applicable: bool,
    pub monotone: bool,
    /// First step `t` with `D(t) ≥ D(t−1)` while `D(t−1)` was above the floor.
    pub first_increase_step: Option<usize>,
    pub final_d: Option<f64>,
}

pub fn lyapunov_audit(trace: &SimTrace) -> LyapunovAudit {
    match trace.lyapunov() {
        Some(d) => audit_sequence(&d),
        None => LyapunovAudit { applicable: false, monotone: false, first_increase_step: None, final_d: None },
    }
}

/// Strict decrease while above [`LYAPUNOV_FLOOR`].
pub fn audit_sequence(d: &[f64]) -> LyapunovAudit {
    let first = d.windows(2).position(|w| w[0] > LYAPUNOV_FLOOR && !(w[1] < w[0])).map(|k| k + 1);
    LyapunovAudit { applicable: true, monotone: first.is_none(), first_increase_step: first, final_d: d.last().copied() }
}

/// Copy of `bundle` with one `W_z` entry overwritten, for testing that the
/// checks notice broken models.
pub fn inject_wz_fault(bundle: &ControllerBundle, model: usize, layer: usize, row: usize, col: usize, value: f64) -> Result<ControllerBundle> {
    let mut b = bundle.clone();
    let layers = b
        .models_mut()
        .get_mut(model)
        .ok_or_else(|| Error::Precondition(format!("no model {model}")))?
        .layers_mut();
    let wz = layers
        .get_mut(layer)
        .and_then(|l| l.w_z.as_mut())
        .ok_or_else(|| Error::Precondition(format!("layer {layer} has no W_z")))?;
    if row >= wz.nrows() || col >= wz.ncols() {
        return Err(Error::Precondition(format!("entry ({row}, {col}) outside W_z")));
    }
    wz[(row, col)] = value;
    Ok(b)
}
