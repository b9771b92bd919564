use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::ReactiveBox;
use crate::error::{Error, Result};
use crate::grid::{Grid, PowerScenario};
use crate::opf::{read_labels_csv, solve_opf_sequential, write_labels_csv, CostWeights, LabelModel, LabelRow, OpfOptions};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Noisy copies added per profile point.
    pub augmentation_factor: usize,
    /// Half-width of the multiplicative uniform noise on injections.
    pub augmentation_noise: f64,
    pub seed: u64,
    pub label_model: LabelModel,
    /// Passes used when `label_model` is sequential linearization.
    pub sequential_passes: usize,
    /// Trailing days held out for validation.
    pub validation_days: usize,
    /// Threads for labeling; 0 uses all cores.
    pub workers: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            augmentation_factor: 3,
            augmentation_noise: 0.10,
            seed: 0,
            label_model: LabelModel::Linear,
            sequential_passes: 5,
            validation_days: 1,
            workers: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.augmentation_noise) {
            return Err(Error::Config(format!(
                "augmentation noise {} outside [0, 0.5]",
                self.augmentation_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: String,
    pub day: usize,
    pub v_c: DVector<f64>,
    pub q_star: DVector<f64>,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 over the generator config and the input profiles.
    pub config_hash: String,
    pub config: DatasetConfig,
    pub skipped: usize,
    pub opf_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub controllable: Vec<usize>,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn validation_samples(&self) -> impl Iterator<Item = &Sample> {
        self.validation.iter().map(|&i| &self.samples[i])
    }
}

fn hash_inputs(cfg: &DatasetConfig, days: &[Vec<PowerScenario>]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for day in days {
        for s in day {
            h.update(s.label.as_bytes());
            for v in s.p.iter().chain(s.q_uncontrolled.iter()) {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn jitter(s: &PowerScenario, noise: f64, rng: &mut ChaCha8Rng, label: String) -> PowerScenario {
    let mut f = |x: f64| x * (1.0 + if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 });
    PowerScenario::new(s.p.map(&mut f), s.q_uncontrolled.map(&mut f), label)
}

/// Augments each profile point and labels it with the OPF oracle.
///
/// Point `k` (in day-major order) draws its noise from stream `k` of the
/// seeded generator, so results do not depend on the thread count. Points the
/// OPF cannot solve are skipped and counted.
pub fn generate_dataset(grid: &Grid, days: &[Vec<PowerScenario>], bx: &ReactiveBox, w: &CostWeights, cfg: &DatasetConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    if days.iter().all(Vec::is_empty) {
        return Err(Error::Precondition("no profile points to label".into()));
    }
    let points: Vec<(usize, usize, &PowerScenario)> = days
        .iter()
        .enumerate()
        .flat_map(|(d, day)| day.iter().enumerate().map(move |(t, s)| (d, t, s)))
        .collect();
    let opts = OpfOptions::default();
    let passes = match cfg.label_model {
        LabelModel::Linear => 0,
        LabelModel::SequentialLinearization => cfg.sequential_passes,
    };
    let label_point = |k: usize, &(d, _t, s): &(usize, usize, &PowerScenario)| -> Vec<Option<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let mut variants = vec![s.clone()];
        for a in 0..cfg.augmentation_factor {
            variants.push(jitter(s, cfg.augmentation_noise, &mut rng, format!("{}a{}", s.label, a + 1)));
        }
        variants
            .into_iter()
            .map(|sc| match solve_opf_sequential(grid, &sc, bx, w, passes, &opts) {
                Ok(sol) => Some(Sample {
                    v_c: grid.index().gather_controllable(&sol.v_star),
                    q_star: sol.q_star,
                    label: sc.label,
                    day: d,
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", sc.label);
                    None
                }
            })
            .collect()
    };
    let run = || -> Vec<Vec<Option<Sample>>> { points.par_iter().enumerate().map(|(k, p)| label_point(k, p)).collect() };
    let labeled = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    };
    let mut skipped = 0;
    let mut samples = Vec::new();
    for s in labeled.into_iter().flatten() {
        match s {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} points skipped: OPF did not converge");
    }
    let n_days = days.len();
    let first_val_day = n_days.saturating_sub(cfg.validation_days.min(n_days.saturating_sub(1)));
    let (validation, train): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].day >= first_val_day);
    Ok(LabeledDataset {
        controllable: grid.net.controllable().to_vec(),
        samples,
        train,
        validation,
        provenance: Provenance {
            config_hash: hash_inputs(cfg, days),
            config: cfg.clone(),
            skipped,
            opf_tolerance: opts.tolerance,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    base_mva: f64,
    controllable: Vec<usize>,
    days: Vec<usize>,
    validation: Vec<usize>,
    provenance: Provenance,
}

/// Writes `<path>` (label CSV) and `<path>.json` (sidecar with split and provenance).
pub fn save_dataset(path: impl AsRef<Path>, data: &LabeledDataset, base_mva: f64) -> Result<()> {
    let path = path.as_ref();
    let rows: Vec<LabelRow> = data
        .samples
        .iter()
        .map(|s| LabelRow { label: s.label.clone(), v_c: s.v_c.clone(), q_star: s.q_star.clone() })
        .collect();
    let meta = vec![
        ("solver_tolerance".to_string(), data.provenance.opf_tolerance.to_string()),
        ("model".to_string(), data.provenance.config.label_model.as_str().to_string()),
        ("config_hash".to_string(), data.provenance.config_hash.clone()),
    ];
    write_labels_csv(path, &data.controllable, base_mva, &rows, &meta)?;
    let side = Sidecar {
        format_version: DATASET_FORMAT_VERSION,
        base_mva,
        controllable: data.controllable.clone(),
        days: data.samples.iter().map(|s| s.day).collect(),
        validation: data.validation.clone(),
        provenance: data.provenance.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if side.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported dataset format version {}", side.format_version)));
    }
    let (rows, _) = read_labels_csv(path, &side.controllable)?;
    if rows.len() != side.days.len() {
        return Err(Error::Config(format!(
            "dataset has {} rows but the sidecar lists {}",
            rows.len(),
            side.days.len()
        )));
    }
    let samples: Vec<Sample> = rows
        .into_iter()
        .zip(&side.days)
        .map(|(r, &day)| Sample { label: r.label, day, v_c: r.v_c, q_star: r.q_star })
        .collect();
    let val: std::collections::BTreeSet<usize> = side.validation.iter().copied().collect();
    let train = (0..samples.len()).filter(|i| !val.contains(i)).collect();
    Ok(LabeledDataset {
        controllable: side.controllable,
        samples,
        train,
        validation: side.validation,
        provenance: side.provenance,
    })
}
