//! Closed-loop simulation of the incremental control law.
//!
//! An episode holds the injections fixed and iterates
//! `q ← Proj_𝒬(q + ε(φ(ṽ_𝒞) − q) + d_q)` where `ṽ_𝒞` is the controller's
//! (possibly noisy) view of the true voltages. Day runs chain one episode per
//! profile point, carrying `q` over.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{max_stable_stepsize, ControllerBundle, ReactiveBox};
use crate::error::{Error, Result};
use crate::grid::{Grid, PowerFlowModel, PowerScenario};
use crate::opf::{cost_of, solve_opf, CostBreakdown, CostWeights};

/// Anything that maps controllable voltages to reactive targets in a box.
pub trait Policy: Sync {
    fn dim(&self) -> usize;
    fn reactive_box(&self) -> &ReactiveBox;
    /// Target setpoints, already inside the box.
    fn target(&self, v_c: &DVector<f64>) -> Result<DVector<f64>>;
    /// Stepsize the policy was designed for.
    fn design_epsilon(&self) -> f64;
    /// Upper bound on the Lipschitz constant of `target` over the operating region.
    fn lipschitz_bound(&self) -> f64;
}

impl Policy for ControllerBundle {
    fn dim(&self) -> usize {
        ControllerBundle::dim(self)
    }

    fn reactive_box(&self) -> &ReactiveBox {
        ControllerBundle::reactive_box(self)
    }

    fn target(&self, v_c: &DVector<f64>) -> Result<DVector<f64>> {
        self.phi(v_c)
    }

    fn design_epsilon(&self) -> f64 {
        self.epsilon()
    }

    fn lipschitz_bound(&self) -> f64 {
        self.cached_lipschitz().unwrap_or_else(|| ControllerBundle::lipschitz_bound(self, 0.9, 1.1))
    }
}

/// `φ(v) = Proj_𝒬(−A(v − c))` with `A` symmetric PSD, monotone with Lipschitz
/// constant `‖A‖`.
#[derive(Debug, Clone)]
pub struct LinearPolicy {
    pub gain: DMatrix<f64>,
    pub center: DVector<f64>,
    pub bx: ReactiveBox,
    pub epsilon: f64,
}

impl LinearPolicy {
    pub fn new(gain: DMatrix<f64>, center: DVector<f64>, bx: ReactiveBox, epsilon: f64) -> Result<Self> {
        let d = center.len();
        if gain.shape() != (d, d) || bx.len() != d {
            return Err(Error::Dimension("gain, center and box must agree".into()));
        }
        if (&gain - gain.transpose()).amax() > 1e-12 * gain.amax().max(1.0) {
            return Err(Error::Config("linear policy gain must be symmetric".into()));
        }
        Ok(Self { gain, center, bx, epsilon })
    }
}

impl Policy for LinearPolicy {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn reactive_box(&self) -> &ReactiveBox {
        &self.bx
    }

    fn target(&self, v_c: &DVector<f64>) -> Result<DVector<f64>> {
        if v_c.len() != self.dim() {
            return Err(Error::Dimension(format!("v_c has {} entries, expected {}", v_c.len(), self.dim())));
        }
        Ok(self.bx.clamp(&(-(&self.gain * (v_c - &self.center)))))
    }

    fn design_epsilon(&self) -> f64 {
        self.epsilon
    }

    fn lipschitz_bound(&self) -> f64 {
        self.gain.clone().symmetric_eigen().eigenvalues.amax()
    }
}

/// Linear model restricted to the controllable buses: `v_𝒞 = X_𝒞𝒞 q + ṽ`.
#[derive(Debug, Clone)]
pub struct ReducedPlant {
    pub x_cc: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl ReducedPlant {
    pub fn new(x_cc: DMatrix<f64>, v_tilde: DVector<f64>) -> Result<Self> {
        if x_cc.shape() != (v_tilde.len(), v_tilde.len()) {
            return Err(Error::Dimension("X_cc and ṽ disagree".into()));
        }
        let chol = Cholesky::new(x_cc.clone()).ok_or_else(|| Error::Numerical("X_cc is not positive definite".into()))?;
        Ok(Self { x_cc, v_tilde, chol })
    }

    pub fn from_grid(grid: &Grid, scen: &PowerScenario) -> Result<Self> {
        let (x_cc, v_tilde) = grid.mat.partition_controllable(scen)?;
        Self::new(x_cc, v_tilde)
    }

    pub fn voltages(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.x_cc * q + &self.v_tilde
    }

    /// `(v − v*)ᵀ X_𝒞𝒞⁻¹ (v − v*)`.
    pub fn lyapunov(&self, v_c: &DVector<f64>, v_star: &DVector<f64>) -> f64 {
        let e = v_c - v_star;
        e.dot(&self.chol.solve(&e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Half-width of the additive uniform disturbance on setpoints (p.u.).
    pub d_q: f64,
    /// Half-width of the relative uniform error on measured voltages.
    pub d_v: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { d_q: 0.0, d_v: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostAccounting {
    /// Cost of the state at the end of each episode.
    #[default]
    Terminal,
    /// Mean cost over the episode's steps after the initial state.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub steps: usize,
    /// Stepsize; `None` uses the policy's design value.
    pub epsilon: Option<f64>,
    pub pf_model: PowerFlowModel,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub accounting: CostAccounting,
    /// Record the Lyapunov value of every step (needs an equilibrium solve per episode).
    pub track_lyapunov: bool,
    /// Include the OPF reference in day reports.
    pub opf_reference: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            epsilon: None,
            pf_model: PowerFlowModel::Nonlinear,
            noise: NoiseConfig::default(),
            seed: 0,
            accounting: CostAccounting::Terminal,
            track_lyapunov: false,
            opf_reference: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if let Some(e) = self.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("epsilon {e} outside [0, 1]")));
            }
        }
        if !(self.noise.d_q >= 0.0 && self.noise.d_v >= 0.0) {
            return Err(Error::Config("noise magnitudes must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// True voltages at every bus.
    pub v: DVector<f64>,
    pub q_c: DVector<f64>,
    pub lyapunov: Option<f64>,
    pub cost: CostBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub label: String,
    pub steps: Vec<TraceStep>,
    /// `‖φ(v_T) − q_T‖_∞` at the last recorded step.
    pub residual: f64,
    /// Set when the power flow failed and the trace was cut short.
    pub error: Option<String>,
}

impl SimTrace {
    pub fn last(&self) -> &TraceStep {
        self.steps.last().expect("trace has the initial state")
    }

    pub fn lyapunov(&self) -> Option<Vec<f64>> {
        self.steps.iter().map(|s| s.lyapunov).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, controllable: &[usize]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.steps.first().map_or(0, |s| s.v.len());
        let mut header = vec!["step".to_string()];
        header.extend((1..=n).map(|b| format!("v_bus{b}")));
        header.extend(controllable.iter().map(|b| format!("q_bus{b}")));
        header.extend(["lyapunov", "volt_cost", "loss_cost"].map(String::from));
        w.write_record(&header)?;
        for (t, s) in self.steps.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(s.v.iter().map(|x| x.to_string()));
            rec.extend(s.q_c.iter().map(|x| x.to_string()));
            rec.push(s.lyapunov.map(|d| d.to_string()).unwrap_or_default());
            rec.push(s.cost.volt.to_string());
            rec.push(s.cost.loss.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    /// Controllable voltages at the fixed point.
    pub v_star: DVector<f64>,
    pub q_star: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Stepsize of the damped iteration; `None` picks 0.9 times the stability bound.
    pub epsilon: Option<f64>,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 100_000, epsilon: None }
    }
}

/// Unique fixed point `q = φ(X_𝒞𝒞 q + ṽ)` of the linear closed loop, by damped
/// iteration from `q0`.
pub fn find_equilibrium_on<P: Policy + ?Sized>(policy: &P, plant: &ReducedPlant, q0: &DVector<f64>, opts: &EquilibriumOptions) -> Result<Equilibrium> {
    let bx = policy.reactive_box();
    if !bx.contains(q0) {
        return Err(Error::Precondition("q0 lies outside the reactive box".into()));
    }
    let x_norm = plant.x_cc.clone().symmetric_eigen().eigenvalues.amax();
    let eps = opts.epsilon.unwrap_or_else(|| 0.9 * max_stable_stepsize(policy.lipschitz_bound(), x_norm));
    let mut q = q0.clone();
    let mut residual = f64::INFINITY;
    for it in 0..=opts.max_iterations {
        let v = plant.voltages(&q);
        let target = policy.target(&v)?;
        residual = (&target - &q).amax();
        if residual < opts.tolerance {
            return Ok(Equilibrium { v_star: v, q_star: q, residual, iterations: it });
        }
        q = bx.clamp(&(&q + (target - &q) * eps));
    }
    Err(Error::NotConverged { what: "equilibrium iteration", iterations: opts.max_iterations, residual })
}

pub fn find_equilibrium<P: Policy + ?Sized>(grid: &Grid, policy: &P, scen: &PowerScenario) -> Result<Equilibrium> {
    find_equilibrium_from(grid, policy, scen, &DVector::zeros(policy.dim()))
}

pub fn find_equilibrium_from<P: Policy + ?Sized>(grid: &Grid, policy: &P, scen: &PowerScenario, q0: &DVector<f64>) -> Result<Equilibrium> {
    let plant = ReducedPlant::from_grid(grid, scen)?;
    find_equilibrium_on(policy, &plant, q0, &EquilibriumOptions::default())
}

/// Closed loop on a reduced linear plant, noise-free, until `D < stop_below` or
/// `max_steps`. Returns the Lyapunov sequence against `v_star`.
pub fn linear_lyapunov_run<P: Policy + ?Sized>(
    policy: &P,
    plant: &ReducedPlant,
    q0: &DVector<f64>,
    epsilon: f64,
    v_star: &DVector<f64>,
    stop_below: f64,
    max_steps: usize,
) -> Result<Vec<f64>> {
    let bx = policy.reactive_box();
    let mut q = q0.clone();
    let mut v = plant.voltages(&q);
    let mut out = vec![plant.lyapunov(&v, v_star)];
    while out.len() <= max_steps && *out.last().expect("nonempty") >= stop_below {
        let target = policy.target(&v)?;
        q = bx.clamp(&(&q + (target - &q) * epsilon));
        v = plant.voltages(&q);
        out.push(plant.lyapunov(&v, v_star));
    }
    Ok(out)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0))
}

/// One episode on the full grid. `rng` drives the disturbances; it is advanced
/// by the same amount whatever the noise magnitudes, so runs that differ only
/// in noise level see the same random draws.
pub fn run_episode_with<P: Policy + ?Sized>(
    grid: &Grid,
    policy: &P,
    scen: &PowerScenario,
    q0: &DVector<f64>,
    cfg: &SimConfig,
    equilibrium: Option<&Equilibrium>,
    rng: &mut ChaCha8Rng,
) -> Result<SimTrace> {
    cfg.validate()?;
    let bx = policy.reactive_box();
    if q0.len() != policy.dim() {
        return Err(Error::Dimension(format!("q0 has {} entries, expected {}", q0.len(), policy.dim())));
    }
    if !bx.contains(q0) {
        return Err(Error::Precondition("q0 lies outside the reactive box".into()));
    }
    let eps = cfg.epsilon.unwrap_or_else(|| policy.design_epsilon());
    let w = CostWeights::standard(&grid.mat);
    let index = grid.index();
    let plant = if equilibrium.is_some() { Some(ReducedPlant::from_grid(grid, scen)?) } else { None };

    let record = |q: &DVector<f64>| -> Result<TraceStep> {
        let v = grid.voltages(cfg.pf_model, scen, q)?;
        let q_full = index.assemble_q(&scen.q_uncontrolled, q)?;
        let lyapunov = match (&plant, equilibrium) {
            (Some(p), Some(eq)) => Some(p.lyapunov(&index.gather_controllable(&v), &eq.v_star)),
            _ => None,
        };
        Ok(TraceStep { cost: cost_of(&v, &q_full, &w), v, q_c: q.clone(), lyapunov })
    };

    let mut steps = Vec::with_capacity(cfg.steps + 1);
    let mut error = None;
    match record(q0) {
        Ok(s) => steps.push(s),
        Err(e) => return Err(e),
    }
    for _ in 0..cfg.steps {
        let cur = steps.last().expect("nonempty");
        let v_c = index.gather_controllable(&cur.v);
        let u_v = uniform_vec(rng, v_c.len());
        let u_q = uniform_vec(rng, v_c.len());
        let seen = v_c.zip_map(&u_v, |v, u| v * (1.0 + cfg.noise.d_v * u));
        let target = policy.target(&seen)?;
        let next = bx.clamp(&(&cur.q_c + (target - &cur.q_c) * eps + u_q * cfg.noise.d_q));
        match record(&next) {
            Ok(s) => steps.push(s),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    let last = steps.last().expect("nonempty");
    let residual = (policy.target(&index.gather_controllable(&last.v))? - &last.q_c).amax();
    Ok(SimTrace { label: scen.label.clone(), steps, residual, error })
}

pub fn run_episode<P: Policy + ?Sized>(grid: &Grid, policy: &P, scen: &PowerScenario, q0: &DVector<f64>, cfg: &SimConfig) -> Result<SimTrace> {
    let eq = if cfg.track_lyapunov { find_equilibrium(grid, policy, scen).ok() } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_episode_with(grid, policy, scen, q0, cfg, eq.as_ref(), &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub label: String,
    pub controller: CostBreakdown,
    pub no_control: CostBreakdown,
    pub opf: Option<CostBreakdown>,
    pub residual: f64,
    /// Terminal true voltages at every bus.
    pub v: Vec<f64>,
    pub q_c: Vec<f64>,
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub cost_volt: f64,
    pub cost_loss: f64,
    pub total: f64,
    /// Reduction of total cost relative to no control, in percent.
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub controller: String,
    pub config: SimConfig,
    pub controller_total: CostBreakdown,
    pub no_control_total: CostBreakdown,
    pub opf_total: Option<CostBreakdown>,
    pub failed_points: usize,
    pub points: Vec<PointRecord>,
}

impl DayReport {
    pub fn row(&self, name: &str, c: CostBreakdown) -> TableRow {
        let base = self.no_control_total.total();
        TableRow {
            name: name.to_string(),
            cost_volt: c.volt,
            cost_loss: c.loss,
            total: c.total(),
            improvement_pct: if base > 0.0 { 100.0 * (1.0 - c.total() / base) } else { 0.0 },
        }
    }

    /// Rows for no control, this controller and (when present) OPF.
    pub fn table(&self) -> Vec<TableRow> {
        let mut rows = vec![self.row("NoCtrl", self.no_control_total), self.row(&self.controller, self.controller_total)];
        if let Some(o) = self.opf_total {
            rows.push(self.row("OPF", o));
        }
        rows
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Terminal voltages per point, one row per point, for plotting.
    pub fn write_voltages_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.points.first().map_or(0, |p| p.v.len());
        let mut header = vec!["point".to_string(), "label".to_string()];
        header.extend((1..=n).map(|b| format!("v_bus{b}")));
        w.write_record(&header)?;
        for (k, p) in self.points.iter().enumerate() {
            let mut rec = vec![k.to_string(), p.label.clone()];
            rec.extend(p.v.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one episode per point with `q` carried over, starting from `q = 0`,
/// and compares with no control and (optionally) the OPF setpoints.
pub fn run_day<P: Policy + ?Sized>(grid: &Grid, policy: &P, name: &str, day: &[PowerScenario], cfg: &SimConfig) -> Result<DayReport> {
    cfg.validate()?;
    if day.is_empty() {
        return Err(Error::Precondition("day has no points".into()));
    }
    let w = CostWeights::standard(&grid.mat);
    let index = grid.index();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = DVector::zeros(policy.dim());
    let mut points = Vec::with_capacity(day.len());
    let (mut ctrl, mut none, mut opf_total) = (CostBreakdown::default(), CostBreakdown::default(), CostBreakdown::default());
    let mut failed = 0;
    for scen in day {
        let eq = if cfg.track_lyapunov { find_equilibrium(grid, policy, scen).ok() } else { None };
        let trace = run_episode_with(grid, policy, scen, &q, cfg, eq.as_ref(), &mut rng)?;
        if trace.error.is_some() {
            failed += 1;
        }
        let c = match cfg.accounting {
            CostAccounting::Terminal => trace.last().cost,
            CostAccounting::PerStep => {
                let k = (trace.steps.len() - 1).max(1) as f64;
                let mut acc = CostBreakdown::default();
                for s in trace.steps.iter().skip(1) {
                    acc += s.cost;
                }
                CostBreakdown { volt: acc.volt / k, loss: acc.loss / k }
            }
        };
        let zero = DVector::zeros(policy.dim());
        let v0 = grid.voltages(cfg.pf_model, scen, &zero)?;
        let nc = cost_of(&v0, &index.assemble_q(&scen.q_uncontrolled, &zero)?, &w);
        let oc = if cfg.opf_reference {
            let sol = solve_opf(&grid.mat, scen, policy.reactive_box(), &w)?;
            let v = grid.voltages(cfg.pf_model, scen, &sol.q_star)?;
            Some(cost_of(&v, &index.assemble_q(&scen.q_uncontrolled, &sol.q_star)?, &w))
        } else {
            None
        };
        ctrl += c;
        none += nc;
        if let Some(o) = oc {
            opf_total += o;
        }
        let last = trace.last();
        q = last.q_c.clone();
        points.push(PointRecord {
            label: scen.label.clone(),
            controller: c,
            no_control: nc,
            opf: oc,
            residual: trace.residual,
            v: last.v.iter().copied().collect(),
            q_c: last.q_c.iter().copied().collect(),
        });
    }
    Ok(DayReport {
        controller: name.to_string(),
        config: *cfg,
        controller_total: ctrl,
        no_control_total: none,
        opf_total: cfg.opf_reference.then_some(opf_total),
        failed_points: failed,
        points,
    })
}
