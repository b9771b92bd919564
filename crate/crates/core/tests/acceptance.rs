//! Acceptance report for the reference experiment in `data/experiment.toml`.
//!
//! Prints one PASS or FAIL line per criterion and a summary. The process exits
//! 0 either way so the report shows up in an ordinary test run; set
//! `ACCEPTANCE_STRICT=1` to turn any FAIL into a nonzero exit.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltvar::cli::ExperimentConfig;
use voltvar::controller::{cover_cliques, max_stable_stepsize, CommGraph, CommSetup, ControllerBundle, ReactiveBox};
use voltvar::grid::{solve_distflow, Grid, PowerScenario};
use voltvar::icnn::{IcnnConfig, IcnnModel};
use voltvar::learn::{evaluate, fit_bundle, generate_dataset, synthetic_days, LabeledDataset};
use voltvar::opf::{CostWeights, OpfOptions, OpfProblem};
use voltvar::sim::{
    find_equilibrium_from, find_equilibrium_on, linear_lyapunov_run, run_day, run_episode_with, EquilibriumOptions, LinearPolicy,
    NoiseConfig, ReducedPlant, SimConfig,
};
use voltvar::verify::{audit_sequence, certify_bundle, check_monotonicity, inject_wz_fault, CertifyOptions, MONOTONICITY_TOL};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self { pass: false, detail: format!("error: {e}") }
    }
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

/// Trained and certified bundles for the four communication setups.
struct Fixture {
    cfg: ExperimentConfig,
    grid: Grid,
    bx: ReactiveBox,
    data: LabeledDataset,
    held_out: Vec<PowerScenario>,
    bundles: Vec<ControllerBundle>,
    certified: Vec<bool>,
    pipeline: Duration,
}

impl Fixture {
    fn build() -> Res<Self> {
        let t = Instant::now();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/experiment.toml");
        let cfg = ExperimentConfig::load(path)?;
        let grid = cfg.grid()?;
        let bx = cfg.reactive_box(&grid)?;
        let w = CostWeights::standard(&grid.mat);
        let days = synthetic_days(&grid.net, &bx, &cfg.profiles)?;
        let data = generate_dataset(&grid, &days, &bx, &w, &cfg.dataset)?;
        let held_out = days.last().ok_or("no profile days")?.clone();
        let controllable = grid.index().controllable().to_vec();
        let tcfg = cfg.train_config(&grid);
        let mut bundles = Vec::new();
        let mut certified = Vec::new();
        for setup in CommSetup::ALL {
            let part = setup.partition(&controllable)?;
            let (mut b, _) = fit_bundle(setup.label(), &controllable, part, &bx, cfg.epsilon, &cfg.icnn, &data, &tcfg)?;
            certified.push(certify_bundle(&mut b, &grid.mat, &cfg.certify)?.ok);
            bundles.push(b);
        }
        Ok(Self { cfg, grid, bx, data, held_out, bundles, certified, pipeline: t.elapsed() })
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn structural_guarantee(fx: &Fixture) -> Res<Outcome> {
    let t = Instant::now();
    let region = fx.cfg.certify.region;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for (k, b) in fx.bundles.iter().enumerate() {
        let r = check_monotonicity(b, 100_000, region, 100 + k as u64)?;
        violations += r.violations;
        worst = worst.max(r.worst_value);
    }

    // the structural check catches a negative W_z entry; a small sample suffices
    let opts = CertifyOptions { monotonicity_pairs: 10_000, lipschitz_samples: 1_000, ..fx.cfg.certify };
    let mut flagged = 0;
    for b in &fx.bundles {
        let mut bad = inject_wz_fault(b, 0, 1, 0, 0, -1.0)?;
        if !certify_bundle(&mut bad, &fx.grid.mat, &opts)?.ok {
            flagged += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = violations == 0 && flagged == fx.bundles.len() && elapsed < Duration::from_secs(30);
    Ok(Outcome::new(
        pass,
        format!(
            "{} bundles x 1e5 pairs: {violations} violations (worst s = {worst:.2e}, tol {MONOTONICITY_TOL:e}); faults flagged {flagged}/{}; {} on {} thread(s)",
            fx.bundles.len(),
            fx.bundles.len(),
            secs(elapsed),
            rayon::current_num_threads()
        ),
    ))
}

fn random_spd(d: usize, norm: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let m = &b * b.transpose() + DMatrix::identity(d, d) * 0.05;
    let top = m.clone().symmetric_eigen().eigenvalues.max();
    m * (norm / top)
}

/// PSD gain with largest eigenvalue exactly `l`.
fn gain_with_norm(d: usize, l: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let q = b.qr().q();
    let mut lam: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..l)).collect();
    lam[0] = l;
    &q * DMatrix::from_diagonal(&DVector::from_vec(lam)) * q.transpose()
}

fn stepsize_law() -> Res<Outcome> {
    let t = Instant::now();
    let exact = max_stable_stepsize(0.0, 0.5725) == 1.0 && max_stable_stepsize(2.0, 1.0) == 0.4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    let mut longest = 0;
    for run in 0..50 {
        let d = rng.gen_range(2..=8);
        let l = rng.gen_range(0.1..10.0);
        let x_norm = rng.gen_range(0.1..2.0);
        let x = random_spd(d, x_norm, &mut rng);
        let v_tilde = DVector::from_fn(d, |_, _| rng.gen_range(0.95..1.05));
        let lim = DVector::from_fn(d, |_, _| rng.gen_range(0.01..0.2));
        let bx = ReactiveBox::symmetric(lim)?;
        let eps = 0.9 * max_stable_stepsize(l, x_norm);
        let policy = LinearPolicy::new(gain_with_norm(d, l, &mut rng), DVector::from_element(d, 1.0), bx.clone(), eps)?;
        let plant = ReducedPlant::new(x, v_tilde)?;
        let opts = EquilibriumOptions::default();
        let eq = find_equilibrium_on(&policy, &plant, &DVector::zeros(d), &opts)?;
        let q0 = bx.sample(&mut rng);
        let seq = linear_lyapunov_run(&policy, &plant, &q0, eps, &eq.v_star, 1e-10, 1_000_000)?;
        longest = longest.max(seq.len());
        let audit = audit_sequence(&seq);
        let last = *seq.last().ok_or("empty run")?;
        if !(audit.monotone && last < 1e-10) {
            failures.push(format!("run {run} (L {l:.2}, |X| {x_norm:.2}): monotone {} final {last:.1e}", audit.monotone));
        }
    }
    let elapsed = t.elapsed();
    let pass = exact && failures.is_empty() && elapsed < Duration::from_secs(60);
    let mut detail = format!("bound(0)=1, bound(2,1)=0.4 exact: {exact}; 50 runs, {} failed, longest {longest} steps; {}", failures.len(), secs(elapsed));
    if let Some(f) = failures.first() {
        detail += &format!("; first: {f}");
    }
    Ok(Outcome::new(pass, detail))
}

fn equilibrium_uniqueness(fx: &Fixture) -> Res<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut spread: f64 = 0.0;
    for b in &fx.bundles {
        for scen in [&fx.held_out[10], &fx.held_out[48], &fx.held_out[80]] {
            let starts: Vec<DVector<f64>> = (0..20).map(|_| fx.bx.sample(&mut rng)).collect();
            let v: Vec<DVector<f64>> =
                starts.iter().map(|q0| find_equilibrium_from(&fx.grid, b, scen, q0).map(|e| e.v_star)).collect::<voltvar::Result<_>>()?;
            for w in &v[1..] {
                spread = spread.max((w - &v[0]).amax());
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = spread <= 1e-6 && elapsed < Duration::from_secs(60);
    Ok(Outcome::new(pass, format!("4 bundles x 3 points x 20 starts: max |v* - v*_0| = {spread:.1e}; {}", secs(elapsed))))
}

/// Day totals averaged over independent noise draws; a single draw can land
/// on either side of the noise-free total.
fn iss_noise(fx: &Fixture) -> Res<Outcome> {
    const DRAWS: u64 = 8;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut slowest = Duration::ZERO;
    for b in &fx.bundles {
        let mut means = Vec::new();
        let mut range = (f64::INFINITY, f64::NEG_INFINITY);
        for level in fx.cfg.report.noise_levels.iter().copied() {
            let mut acc = 0.0;
            for seed in 0..DRAWS {
                let t = Instant::now();
                let sim = SimConfig { noise: NoiseConfig { d_v: level, ..fx.cfg.sim.noise }, seed, opf_reference: false, ..fx.cfg.sim };
                let total = run_day(&fx.grid, b, &b.label, &fx.held_out, &sim)?.controller_total.total();
                slowest = slowest.max(t.elapsed());
                acc += total;
                if level > 0.0 {
                    range = (range.0.min(total), range.1.max(total));
                }
            }
            means.push(acc / DRAWS as f64);
        }
        let nondecreasing = means.windows(2).all(|w| w[1] >= w[0]);
        let degradation = means.last().copied().unwrap_or(f64::NAN) / means[0] - 1.0;
        pass &= nondecreasing && degradation <= 0.01;
        let shown: Vec<String> = means.iter().map(|t| format!("{t:.4}")).collect();
        parts.push(format!("{} [{}] {:+.2}% (noisy draws {:.4}..{:.4})", b.label, shown.join(", "), 100.0 * degradation, range.0, range.1));
    }
    pass &= slowest < Duration::from_secs(600);
    Ok(Outcome::new(pass, format!("mean of {DRAWS} draws: {}; slowest day {}", parts.join("; "), secs(slowest))))
}

fn communication_ordering(fx: &Fixture) -> Res<Outcome> {
    let t = Instant::now();
    let mut totals = Vec::new();
    let mut no_control = f64::NAN;
    let mut opf = f64::NAN;
    for b in &fx.bundles {
        let r = run_day(&fx.grid, b, &b.label, &fx.held_out, &fx.cfg.sim)?;
        no_control = r.no_control_total.total();
        opf = r.opf_total.map_or(f64::NAN, |o| o.total());
        totals.push(r.controller_total.total());
    }
    let runtime = fx.pipeline + t.elapsed();
    let slack = 1.02;
    let ordered = no_control > totals[0] && totals.windows(2).all(|w| w[0] * slack >= w[1]) && totals[3] >= opf;
    let improvement: Vec<f64> = totals.iter().map(|c| 100.0 * (1.0 - c / no_control)).collect();
    let enough = improvement.iter().all(|&i| i >= 50.0);
    let certified = fx.certified.iter().all(|&c| c);
    let mse: Vec<f64> =
        fx.bundles.iter().map(|b| evaluate(b, fx.data.validation_samples()).map(|e| e.mse)).collect::<voltvar::Result<_>>()?;
    // not part of the criterion: richer communication should not fit worse
    let fit_ordered = mse.windows(2).all(|w| w[1] <= 1.05 * w[0]);
    let fit: Vec<String> = mse.iter().map(|m| format!("{m:.3e}")).collect();
    let rows: Vec<String> =
        fx.bundles.iter().zip(&totals).zip(&improvement).map(|((b, c), i)| format!("{} {c:.4} ({i:.1}%)", b.label)).collect();
    let pass = ordered && enough && certified && runtime < Duration::from_secs(3600);
    Ok(Outcome::new(
        pass,
        format!(
            "NoCtrl {no_control:.4} > {} > OPF {opf:.4}; ordered {ordered}, all >= 50% {enough}, certified {certified}; held-out mse [{}] within 5% per level {fit_ordered}; pipeline {}",
            rows.join(" > "),
            fit.join(", "),
            secs(runtime)
        ),
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn numerical_kernels(fx: &Fixture) -> Res<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    // ICNN gradients against central differences
    let (mut in_err, mut par_err): (f64, f64) = (0.0, 0.0);
    let mut models: Vec<IcnnModel> = Vec::new();
    for seed in 0..6u64 {
        let cfg = IcnnConfig { hidden: vec![8, 6], ..fx.cfg.icnn.clone() };
        let mut m = IcnnModel::init(1 + seed as usize % 4, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for l in m.layers_mut() {
            l.b.apply(|b| *b += rng.gen_range(-0.3..0.3));
        }
        models.push(m);
    }
    models.extend(fx.bundles.iter().map(|b| b.models()[0].clone()));
    for m in &models {
        let d = m.input_dim();
        let x = DVector::from_fn(d, |_, _| rng.gen_range(0.9..1.1));
        let g = m.input_gradient(&x)?;
        let h = 1e-5;
        for i in 0..d {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.forward(&xp)? - m.forward(&xm)?) / (2.0 * h);
            in_err = in_err.max(rel_err(g[i], fd));
        }
        let grad = m.param_gradient(&x, 1.0)?.flatten();
        let theta = m.params();
        let h = 1e-6;
        // a spread of parameters keeps the trained 64-wide models cheap
        let stride = (theta.len() / 200).max(1);
        for k in (0..theta.len()).step_by(stride) {
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp[k] += h;
            tm[k] -= h;
            let (mut mp, mut mm) = (m.clone(), m.clone());
            mp.set_params(&tp)?;
            mm.set_params(&tm)?;
            let fd = (mp.forward(&x)? - mm.forward(&x)?) / (2.0 * h);
            par_err = par_err.max(rel_err(grad[k], fd));
        }
    }

    // OPF optimality and restarts
    let w = CostWeights::standard(&fx.grid.mat);
    let opts = OpfOptions::default();
    let (mut kkt, mut spread): (f64, f64) = (0.0, 0.0);
    for scen in fx.held_out.iter().step_by(8) {
        let prob = OpfProblem::new(&fx.grid.mat, scen, &fx.bx, &w, None)?;
        let base = prob.solve(&opts)?;
        kkt = kkt.max(prob.kkt_residual(&base.q_star));
        for _ in 0..5 {
            let s = prob.solve_from(&fx.bx.sample(&mut rng), &opts)?;
            kkt = kkt.max(s.kkt_residual);
            spread = spread.max((&s.q_star - &base.q_star).amax());
        }
    }

    // LinDistFlow against DistFlow as injections are halved
    let (mut worst_gap, mut lo_ratio, mut hi_ratio): (f64, f64, f64) = (0.0, f64::INFINITY, 0.0);
    let n = fx.grid.mat.n();
    let nu = fx.grid.index().uncontrollable().len();
    let nc = fx.grid.index().controllable().len();
    for _ in 0..10 {
        let p = DVector::from_fn(n, |_, _| rng.gen_range(-0.05..=0.05));
        let qu = DVector::from_fn(nu, |_, _| rng.gen_range(-0.05..=0.05));
        let qc = DVector::from_fn(nc, |_, _| rng.gen_range(-0.05..=0.05));
        let scen = PowerScenario::new(p, qu, "rand");
        let gap = |a: f64| -> Res<f64> {
            let s = scen.scaled(a);
            let q = &qc * a;
            Ok((fx.grid.mat.solve_lindistflow(&s, &q)? - solve_distflow(&fx.grid.net, &s, &q)?).amax())
        };
        let g = [gap(1.0)?, gap(0.5)?, gap(0.25)?];
        worst_gap = worst_gap.max(g[0]);
        for r in [g[0] / g[1], g[1] / g[2]] {
            lo_ratio = lo_ratio.min(r);
            hi_ratio = hi_ratio.max(r);
        }
    }
    let elapsed = t.elapsed();
    let pass = in_err <= 1e-5
        && par_err <= 1e-4
        && kkt < 1e-8
        && spread <= 1e-6
        && worst_gap <= 5e-3
        && lo_ratio >= 3.5
        && hi_ratio <= 4.5
        && elapsed < Duration::from_secs(120);
    Ok(Outcome::new(
        pass,
        format!(
            "icnn rel err input {in_err:.1e} param {par_err:.1e}; opf kkt {kkt:.1e} restart spread {spread:.1e}; \
             pf gap {worst_gap:.1e} ratios [{lo_ratio:.2}, {hi_ratio:.2}]; {}",
            secs(elapsed)
        ),
    ))
}

fn degenerate_cases(fx: &Fixture) -> Res<Outcome> {
    let index = fx.grid.index();
    let zero = PowerScenario::zero(index, "zero");
    let q0 = DVector::zeros(index.controllable().len());
    let lin = fx.grid.mat.solve_lindistflow(&zero, &q0)?;
    let nl = solve_distflow(&fx.grid.net, &zero, &q0)?;
    let flat = lin.iter().chain(nl.iter()).all(|&v| v == 1.0);

    // every step of disturbed traces, from random starts
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sim = SimConfig { noise: NoiseConfig { d_q: 0.2, d_v: 0.01 }, ..fx.cfg.sim };
    let (mut traces, mut steps, mut outside) = (0, 0, 0);
    for b in &fx.bundles {
        for scen in fx.held_out.iter().step_by(6) {
            let tr = run_episode_with(&fx.grid, b, scen, &fx.bx.sample(&mut rng), &sim, None, &mut rng)?;
            traces += 1;
            steps += tr.steps.len();
            outside += tr.steps.iter().filter(|s| !fx.bx.contains(&s.q_c)).count();
        }
        let day = run_day(&fx.grid, b, &b.label, &fx.held_out, &SimConfig { opf_reference: false, ..sim })?;
        traces += day.points.len();
        steps += day.points.len();
        outside += day.points.iter().filter(|p| !fx.bx.contains(&DVector::from_column_slice(&p.q_c))).count();
    }

    let c = index.controllable().to_vec();
    let full = cover_cliques(&CommGraph::complete(&c));
    let none = cover_cliques(&CommGraph::edgeless(&c));
    let shapes = full.len() == 1
        && full.subgraphs()[0].len() == c.len()
        && none.len() == c.len()
        && none.subgraphs().iter().all(|s| s.len() == 1)
        && CommSetup::Full.partition(&c)?.len() == 1
        && CommSetup::NoComm.partition(&c)?.len() == c.len();

    let pass = flat && outside == 0 && shapes;
    Ok(Outcome::new(
        pass,
        format!(
            "zero injection flat in both models: {flat}; {outside} of {steps} setpoints outside the box over {traces} traces; \
             complete graph -> {} subgraph, edgeless -> {} subgraphs",
            full.len(),
            none.len()
        ),
    ))
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let t = Instant::now();
    let fixture = Fixture::build();
    let run = |f: &dyn Fn(&Fixture) -> Res<Outcome>| match &fixture {
        Ok(fx) => f(fx).unwrap_or_else(Outcome::error),
        Err(e) => Outcome::error(format!("fixture: {e}")),
    };
    let results = [
        ("1 structural stability guarantee", run(&structural_guarantee)),
        ("2 stepsize law", stepsize_law().unwrap_or_else(Outcome::error)),
        ("3 equilibrium uniqueness", run(&equilibrium_uniqueness)),
        ("4 robustness to measurement noise", run(&iss_noise)),
        ("5 communication ordering", run(&communication_ordering)),
        ("6 numerical kernels", run(&numerical_kernels)),
        ("7 degenerate cases", run(&degenerate_cases)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed in {}", results.len() - failed, secs(t.elapsed()));
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
