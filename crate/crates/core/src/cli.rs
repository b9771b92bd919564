//! Command-line front end: one TOML experiment config, six subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{CommSetup, ControllerBundle, Partition, ReactiveBox};
use crate::grid::{read_scenarios_csv, write_scenarios_csv, Grid, GridNetwork, PowerScenario};
use crate::icnn::IcnnConfig;
use crate::learn::{
    fit_bundle, generate_dataset, load_dataset, save_dataset, synthetic_days, write_history_csv, DatasetConfig,
    ProfileConfig, TrainConfig,
};
use crate::opf::CostWeights;
use crate::plot::{render_lines, Series};
use crate::sim::{run_day, DayReport, NoiseConfig, SimConfig, TableRow};
use crate::verify::{certify_bundle, CertifyOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Measurement-noise levels for the robustness table.
    pub noise_levels: Vec<f64>,
    /// Buses drawn in the voltage plots.
    pub plot_buses: Vec<usize>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { noise_levels: vec![0.0, 0.005, 0.01], plot_buses: vec![24, 28, 31, 35, 39, 40, 42] }
    }
}

/// Everything an experiment needs, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Network file; the bundled ucsd49 network when absent.
    pub network: Option<PathBuf>,
    /// Reactive limits in MVar per controllable bus; the ucsd49 limits when absent.
    pub q_lim_mvar: Option<Vec<f64>>,
    pub epsilon: f64,
    /// Derive the training Lipschitz cap from `epsilon` when `train.lipschitz_cap` is unset.
    pub auto_cap: bool,
    pub profiles: ProfileConfig,
    pub dataset: DatasetConfig,
    pub icnn: IcnnConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub certify: CertifyOptions,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: None,
            q_lim_mvar: None,
            epsilon: 0.1,
            auto_cap: true,
            profiles: ProfileConfig::default(),
            dataset: DatasetConfig::default(),
            icnn: crate::learn::default_icnn_config(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            certify: CertifyOptions::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies `--seed` and `--workers`.
    pub fn with_overrides(mut self, seed: Option<u64>, workers: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.profiles.seed = s;
            self.dataset.seed = s;
            self.train.seed = s;
            self.sim.seed = s;
            self.certify.seed = s;
        }
        if let Some(w) = workers {
            self.dataset.workers = w;
            self.train.workers = w.max(1);
        }
        self
    }

    /// SHA-256 of the canonical JSON form, stamped into every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn grid(&self) -> anyhow::Result<Grid> {
        let net = match &self.network {
            Some(p) => GridNetwork::load(p).with_context(|| format!("loading network {}", p.display()))?,
            None => crate::grid::ucsd49(),
        };
        Ok(Grid::new(net)?)
    }

    pub fn reactive_box(&self, grid: &Grid) -> anyhow::Result<ReactiveBox> {
        let base = grid.net.base_mva();
        Ok(match &self.q_lim_mvar {
            Some(l) => ReactiveBox::symmetric_mvar(l, base)?,
            None => ReactiveBox::ucsd49(base),
        })
    }

    /// Training config with the cap filled in when `auto_cap` is set.
    pub fn train_config(&self, grid: &Grid) -> TrainConfig {
        let mut t = self.train.clone();
        if self.auto_cap && t.lipschitz_cap.is_none() {
            t.lipschitz_cap = Some(crate::learn::certifiable_cap(self.epsilon, grid.mat.x_norm, self.certify.safety_factor));
        }
        t
    }
}

#[derive(Debug, Parser)]
#[command(name = "voltvar", version, about = "Stability-constrained learned Volt/Var control")]
pub struct Cli {
    /// Experiment config (TOML); defaults are used for anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores (training uses 1 unless set).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub error_json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a network file and print its summary.
    BuildNet {
        /// Network file; the configured network when omitted.
        path: Option<PathBuf>,
    },
    /// Label profiles with the OPF oracle.
    GenData {
        /// Scenario CSV; synthetic profiles from the config when omitted.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one bundle per communication setup.
    Train {
        /// Dataset CSV written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// NC, DC-1, DC-2, FC or all.
        #[arg(long, default_value = "all")]
        setup: String,
        /// JSON list of bus-id lists, used instead of a named setup.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one day in closed loop.
    Simulate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        /// Day index within the profile file; the last day when omitted.
        #[arg(long)]
        day: Option<usize>,
        /// Relative voltage measurement noise.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify a bundle and store the result in its manifest.
    Verify {
        bundle: PathBuf,
    },
    /// Cost tables, noise sweep and voltage plots across bundles.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        bundles: Vec<PathBuf>,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        day: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize)]
struct ErrorDoc<'a> {
    error: &'a str,
    chain: Vec<String>,
}

/// Entry point for the binary. Returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let json = cli.error_json;
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            if json {
                let doc = ErrorDoc { error: &e.to_string(), chain: e.chain().skip(1).map(|c| c.to_string()).collect() };
                eprintln!("{}", serde_json::to_string(&doc).expect("error serializes"));
            } else {
                eprintln!("error: {e:#}");
            }
            1
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .with_overrides(cli.seed, cli.workers);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        pool = pool.num_threads(w.max(1));
    }
    let pool = pool.build()?;
    pool.install(|| match cli.command {
        Command::BuildNet { path } => cmd_build_net(&cfg, path.as_deref()),
        Command::GenData { profiles, out } => cmd_gen_data(&cfg, profiles.as_deref(), &out),
        Command::Train { data, setup, partition, out } => cmd_train(&cfg, &data, &setup, partition.as_deref(), &out),
        Command::Simulate { bundle, profiles, day, noise, out } => cmd_simulate(&cfg, &bundle, &profiles, day, noise, &out),
        Command::Verify { bundle } => cmd_verify(&cfg, &bundle),
        Command::Report { bundles, profiles, day, out } => cmd_report(&cfg, &bundles, &profiles, day, &out),
    })
}

#[derive(Debug, Serialize)]
pub struct NetSummary {
    pub name: String,
    pub buses: usize,
    pub controllable: usize,
    pub x_cc_norm: f64,
    pub z_base_ohm: f64,
}

pub fn net_summary(grid: &Grid) -> NetSummary {
    NetSummary {
        name: grid.net.name().to_string(),
        buses: grid.net.bus_count(),
        controllable: grid.net.controllable().len(),
        x_cc_norm: grid.mat.x_norm,
        z_base_ohm: grid.net.z_base(),
    }
}

pub fn cmd_build_net(cfg: &ExperimentConfig, path: Option<&Path>) -> anyhow::Result<()> {
    let grid = match path {
        Some(p) => Grid::new(GridNetwork::load(p).with_context(|| format!("loading network {}", p.display()))?)?,
        None => cfg.grid()?,
    };
    println!("{}", serde_json::to_string_pretty(&net_summary(&grid))?);
    Ok(())
}

fn split_days(points: Vec<PowerScenario>, per_day: usize) -> Vec<Vec<PowerScenario>> {
    let per_day = per_day.max(1);
    let mut days = Vec::new();
    let mut it = points.into_iter().peekable();
    while it.peek().is_some() {
        days.push(it.by_ref().take(per_day).collect());
    }
    days
}

fn load_days(cfg: &ExperimentConfig, grid: &Grid, path: &Path) -> anyhow::Result<Vec<Vec<PowerScenario>>> {
    let points = read_scenarios_csv(path, &grid.net).with_context(|| format!("reading profiles {}", path.display()))?;
    if points.is_empty() {
        bail!("profile file {} has no rows", path.display());
    }
    Ok(split_days(points, cfg.profiles.points_per_day))
}

#[derive(Debug, Serialize)]
struct GenSummary {
    samples: usize,
    train: usize,
    validation: usize,
    skipped: usize,
    config_hash: String,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, profiles: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let grid = cfg.grid()?;
    let bx = cfg.reactive_box(&grid)?;
    let days = match profiles {
        Some(p) => load_days(cfg, &grid, p)?,
        None => synthetic_days(&grid.net, &bx, &cfg.profiles)?,
    };
    std::fs::create_dir_all(out)?;
    let flat: Vec<PowerScenario> = days.iter().flatten().cloned().collect();
    write_scenarios_csv(out.join("profiles.csv"), &grid.net, &flat)?;
    let data = generate_dataset(&grid, &days, &bx, &CostWeights::standard(&grid.mat), &cfg.dataset)?;
    save_dataset(out.join("dataset.csv"), &data, grid.net.base_mva())?;
    if data.provenance.skipped > 0 {
        log::warn!("{} points skipped", data.provenance.skipped);
    }
    let summary = GenSummary {
        samples: data.len(),
        train: data.train.len(),
        validation: data.validation.len(),
        skipped: data.provenance.skipped,
        config_hash: cfg.hash(),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    label: String,
    manifest: PathBuf,
    train_mse: f64,
    validation_mse: Option<f64>,
    certified: bool,
    l_analytic: f64,
    eps_bound: f64,
    config_hash: String,
}

pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, setup: &str, partition: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let grid = cfg.grid()?;
    let bx = cfg.reactive_box(&grid)?;
    let data = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let controllable = grid.net.controllable().to_vec();
    let jobs: Vec<(String, Partition)> = match partition {
        Some(p) => {
            let subgraphs: Vec<Vec<usize>> = serde_json::from_str(&std::fs::read_to_string(p)?)
                .with_context(|| format!("parsing partition {}", p.display()))?;
            let name = p.file_stem().map_or("custom".into(), |s| s.to_string_lossy().into_owned());
            vec![(name, Partition::new(subgraphs, &controllable)?)]
        }
        None if setup.eq_ignore_ascii_case("all") => CommSetup::ALL
            .iter()
            .map(|s| Ok((s.label().to_string(), s.partition(&controllable)?)))
            .collect::<crate::Result<_>>()?,
        None => {
            let s = CommSetup::from_label(setup).with_context(|| format!("unknown setup {setup:?} (NC, DC-1, DC-2, FC, all)"))?;
            vec![(s.label().to_string(), s.partition(&controllable)?)]
        }
    };
    let tcfg = cfg.train_config(&grid);
    let mut summaries = Vec::new();
    for (label, part) in jobs {
        let (mut bundle, history) = fit_bundle(&label, &controllable, part, &bx, cfg.epsilon, &cfg.icnn, &data, &tcfg)?;
        let cert = certify_bundle(&mut bundle, &grid.mat, &cfg.certify)?;
        let dir = out.join(&label);
        let manifest = bundle.save(&dir, grid.net.base_mva())?;
        write_history_csv(dir.join("history.csv"), &history)?;
        let last = history.last();
        summaries.push(TrainSummary {
            label,
            manifest,
            train_mse: last.map_or(f64::NAN, |h| h.train_mse),
            validation_mse: last.and_then(|h| h.validation_mse),
            certified: cert.ok,
            l_analytic: cert.l_analytic,
            eps_bound: cert.eps_bound,
            config_hash: cfg.hash(),
        });
    }
    println!("{}", serde_json::to_string_pretty(&summaries)?);
    Ok(())
}

fn load_bundle(grid: &Grid, path: &Path) -> anyhow::Result<ControllerBundle> {
    let (b, base) = ControllerBundle::load(path).with_context(|| format!("loading bundle {}", path.display()))?;
    if b.controllable() != grid.net.controllable() {
        bail!("bundle {} was built for a different controllable set", path.display());
    }
    if (base - grid.net.base_mva()).abs() > 1e-9 {
        bail!("bundle base {base} MVA differs from the network's {} MVA", grid.net.base_mva());
    }
    Ok(b)
}

fn pick_day(days: &[Vec<PowerScenario>], day: Option<usize>) -> anyhow::Result<&[PowerScenario]> {
    let k = day.unwrap_or(days.len() - 1);
    days.get(k).map(Vec::as_slice).with_context(|| format!("day {k} not in profiles ({} days)", days.len()))
}

#[derive(Debug, Serialize)]
struct ReportDoc<'a> {
    config_hash: String,
    table: Vec<TableRow>,
    report: &'a DayReport,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, bundle: &Path, profiles: &Path, day: Option<usize>, noise: Option<f64>, out: &Path) -> anyhow::Result<()> {
    let grid = cfg.grid()?;
    let b = load_bundle(&grid, bundle)?;
    let days = load_days(cfg, &grid, profiles)?;
    let mut sim = cfg.sim;
    if let Some(n) = noise {
        sim.noise = NoiseConfig { d_v: n, ..sim.noise };
    }
    let report = run_day(&grid, &b, &b.label, pick_day(&days, day)?, &sim)?;
    std::fs::create_dir_all(out)?;
    let doc = ReportDoc { config_hash: cfg.hash(), table: report.table(), report: &report };
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&doc)?)?;
    report.write_voltages_csv(out.join("voltages.csv"))?;
    print_table(&doc.table);
    Ok(())
}

pub fn cmd_verify(cfg: &ExperimentConfig, bundle: &Path) -> anyhow::Result<()> {
    let grid = cfg.grid()?;
    let mut b = load_bundle(&grid, bundle)?;
    let cert = certify_bundle(&mut b, &grid.mat, &cfg.certify)?;
    let dir = bundle.parent().unwrap_or_else(|| Path::new("."));
    b.save(dir, grid.net.base_mva())?;
    println!("{}", serde_json::to_string_pretty(&cert)?);
    Ok(())
}

fn print_table(rows: &[TableRow]) {
    println!("{:<10} {:>10} {:>10} {:>10} {:>12}", "", "Cost-Volt", "Cost-Loss", "Total", "Improvement");
    for r in rows {
        println!(
            "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>11.1}%",
            r.name, r.cost_volt, r.cost_loss, r.total, r.improvement_pct
        );
    }
}

/// Rows for the comparison table: no control, one row per report, then OPF
/// (taken from the first report).
pub fn comparison_table(reports: &[DayReport]) -> Vec<TableRow> {
    let Some(first) = reports.first() else { return Vec::new() };
    let mut rows = vec![first.row("NoCtrl", first.no_control_total)];
    rows.extend(reports.iter().map(|r| r.row(&r.controller, r.controller_total)));
    if let Some(o) = first.opf_total {
        rows.push(first.row("OPF", o));
    }
    rows
}

#[derive(Debug, Serialize)]
struct NoiseRow {
    controller: String,
    noise: f64,
    total: f64,
    /// Relative to the same controller without noise, in percent.
    degradation_pct: f64,
}

#[derive(Debug, Serialize)]
struct FullReport {
    config_hash: String,
    table: Vec<TableRow>,
    noise: Vec<NoiseRow>,
}

pub fn cmd_report(cfg: &ExperimentConfig, bundles: &[PathBuf], profiles: &Path, day: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let grid = cfg.grid()?;
    let days = load_days(cfg, &grid, profiles)?;
    let day = pick_day(&days, day)?;
    std::fs::create_dir_all(out)?;
    let mut clean = Vec::new();
    let mut noise_rows = Vec::new();
    let mut bx = None;
    for path in bundles {
        let b = load_bundle(&grid, path)?;
        bx.get_or_insert_with(|| b.reactive_box().clone());
        let mut base_total = None;
        for &level in &cfg.report.noise_levels {
            let sim = SimConfig { noise: NoiseConfig { d_v: level, ..cfg.sim.noise }, opf_reference: clean.is_empty() && level == 0.0, ..cfg.sim };
            let r = run_day(&grid, &b, &b.label, day, &sim)?;
            let total = r.controller_total.total();
            let base = *base_total.get_or_insert(total);
            noise_rows.push(NoiseRow {
                controller: b.label.clone(),
                noise: level,
                total,
                degradation_pct: 100.0 * (total / base - 1.0),
            });
            if level == 0.0 {
                clean.push(r);
            }
        }
        if !cfg.report.noise_levels.contains(&0.0) {
            clean.push(run_day(&grid, &b, &b.label, day, &SimConfig { opf_reference: clean.is_empty(), ..cfg.sim })?);
        }
    }
    let table = comparison_table(&clean);
    print_table(&table);
    let mut w = csv::Writer::from_path(out.join("table.csv"))?;
    for r in &table {
        w.serialize(r)?;
    }
    w.flush()?;
    let doc = FullReport { config_hash: cfg.hash(), table, noise: noise_rows };
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&doc)?)?;
    if let Some(bx) = bx {
        write_voltage_plots(&grid, cfg, &bx, day, &clean, out)?;
    }
    Ok(())
}

/// One CSV and one PNG per controller (plus no control and OPF) with the
/// terminal voltages of the configured buses over the day.
fn write_voltage_plots(
    grid: &Grid,
    cfg: &ExperimentConfig,
    bx: &ReactiveBox,
    day: &[PowerScenario],
    reports: &[DayReport],
    out: &Path,
) -> anyhow::Result<()> {
    let Some(first) = reports.first() else { return Ok(()) };
    let n = grid.net.bus_count();
    let buses: Vec<usize> = cfg.report.plot_buses.iter().copied().filter(|&b| b < n).collect();
    let mut curves: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let zero = DVector::zeros(grid.net.controllable().len());
    let nc = day
        .iter()
        .map(|s| grid.voltages(cfg.sim.pf_model, s, &zero).map(|v| v.iter().copied().collect()))
        .collect::<crate::Result<Vec<Vec<f64>>>>()?;
    curves.push(("NoCtrl".into(), nc));
    for r in reports {
        curves.push((r.controller.clone(), r.points.iter().map(|p| p.v.clone()).collect()));
    }
    if first.opf_total.is_some() {
        let w = CostWeights::standard(&grid.mat);
        let opf = day
            .iter()
            .map(|s| {
                let sol = crate::opf::solve_opf(&grid.mat, s, bx, &w)?;
                grid.voltages(cfg.sim.pf_model, s, &sol.q_star).map(|v| v.iter().copied().collect())
            })
            .collect::<crate::Result<Vec<Vec<f64>>>>()?;
        curves.push(("OPF".into(), opf));
    }
    for (name, v) in &curves {
        let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        let mut w = csv::Writer::from_path(out.join(format!("voltages_{safe}.csv")))?;
        let mut header = vec!["point".to_string()];
        header.extend(buses.iter().map(|b| format!("v_bus{b}")));
        w.write_record(&header)?;
        for (k, row) in v.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(buses.iter().map(|&b| row[b - 1].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let series: Vec<Series> = buses
            .iter()
            .map(|&b| Series { label: format!("bus {b}"), values: v.iter().map(|row| row[b - 1]).collect() })
            .collect();
        render_lines(&series, Some((0.97, 1.03)), &[1.0], out.join(format!("voltages_{safe}.png")))?;
    }
    Ok(())
}
