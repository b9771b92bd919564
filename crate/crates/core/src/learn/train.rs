use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, Sample};
use crate::controller::{ControllerBundle, Partition, ReactiveBox};
use crate::icnn::IcnnConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Upper limit on the analytic Lipschitz bound of `φ` over `region`,
    /// enforced after every step by shrinking model curvature.
    pub lipschitz_cap: Option<f64>,
    pub region: [f64; 2],
    /// Threads for per-batch work; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 30,
            batch_size: 128,
            seed: 0,
            lr_decay: 1.0,
            lipschitz_cap: None,
            region: [0.9, 1.1],
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.region[0] < self.region[1]) {
            return Err(Error::Config("training region must have lo < hi".into()));
        }
        Ok(())
    }
}

/// Lipschitz constant at which `epsilon` sits exactly at `safety` times the
/// stepsize bound for a network with `‖X_cc‖ = x_norm`.
pub fn lipschitz_cap_for(epsilon: f64, x_norm: f64, safety: f64) -> f64 {
    let r = epsilon / safety;
    if r > 1.0 || x_norm <= 0.0 {
        return if r > 1.0 { 0.0 } else { f64::INFINITY };
    }
    (2.0 / r - 1.0).sqrt() / x_norm
}

/// Cap used for training: slightly inside [`lipschitz_cap_for`] so rounding
/// cannot push `ε` over the certification line.
pub fn certifiable_cap(epsilon: f64, x_norm: f64, safety: f64) -> f64 {
    0.999 * lipschitz_cap_for(epsilon, x_norm, safety)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub epoch_loss: f64,
    /// Training loss at the end of the epoch.
    pub train_mse: f64,
    pub validation_mse: Option<f64>,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean over samples of `‖q* − φ(v)‖²`.
    pub mse: f64,
    /// Mean squared error per controllable bus; sums to `mse`.
    pub per_bus_mse: DVector<f64>,
}

/// Fit of the deployed (clamped) `φ`.
pub fn evaluate<'a>(bundle: &ControllerBundle, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Evaluation> {
    let mut per_bus = DVector::zeros(bundle.dim());
    let mut n = 0usize;
    for s in samples {
        let r = bundle.phi(&s.v_c)? - &s.q_star;
        per_bus += r.component_mul(&r);
        n += 1;
    }
    if n > 0 {
        per_bus /= n as f64;
    }
    Ok(Evaluation { mse: per_bus.sum(), per_bus_mse: per_bus })
}

fn raw_mse<'a>(bundle: &ControllerBundle, samples: impl IntoIterator<Item = &'a Sample>) -> Result<f64> {
    let (mut acc, mut n) = (0.0, 0usize);
    for s in samples {
        acc += (bundle.phi_raw(&s.v_c)? - &s.q_star).norm_squared();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Gradient of the batch loss `mean ‖φ_raw(v) − q*‖²`, one flat vector per model.
/// Also returns the batch loss at the parameters the gradient was taken at.
fn batch_gradient(bundle: &ControllerBundle, batch: &[&Sample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = batch.len() as f64;
    let residuals: Vec<DVector<f64>> =
        batch.par_iter().map(|s| bundle.phi_raw(&s.v_c).map(|phi| phi - &s.q_star)).collect::<Result<_>>()?;
    let loss = residuals.iter().map(|r| r.norm_squared()).sum::<f64>() / n;
    let upstream: Vec<DVector<f64>> = residuals.into_iter().map(|r| r * (2.0 / n)).collect();
    let grads = bundle
        .models()
        .par_iter()
        .zip(bundle.members().par_iter())
        .map(|(m, idx)| {
            let mut acc = m.zero_gradient();
            for (s, u) in batch.iter().zip(&upstream) {
                let x = DVector::from_iterator(idx.len(), idx.iter().map(|&i| s.v_c[i]));
                // φ_raw = −∇g on this block
                let c = DVector::from_iterator(idx.len(), idx.iter().map(|&i| -u[i]));
                m.accumulate_input_gradient_vjp(&x, &c, &mut acc)?;
            }
            Ok(acc.flatten())
        })
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

/// Fits `φ_raw` to the labels by mini-batch gradient descent with momentum.
///
/// After each step every `W_z` is clamped at zero, so the bundle stays
/// monotone throughout. With a Lipschitz cap, curvature is shrunk after every
/// step as well.
pub fn train(bundle: &ControllerBundle, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(ControllerBundle, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    if data.controllable != bundle.controllable() {
        return Err(Error::Dimension("dataset and bundle disagree on the controllable set".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| train_inner(bundle, data, cfg))
}

fn train_inner(bundle: &ControllerBundle, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(ControllerBundle, Vec<EpochStats>)> {
    let mut b = bundle.clone();
    let [lo, hi] = cfg.region;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f64>> = b.models().iter().map(|m| vec![0.0; m.param_count()]).collect();
    let mut order = data.train.clone();
    let mut lr = cfg.learning_rate;
    let mut history = Vec::with_capacity(cfg.epochs);
    if let Some(cap) = cfg.lipschitz_cap {
        b.enforce_lipschitz_cap(cap, lo, hi);
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (loss, grads) = match batch_gradient(&b, &batch) {
                Err(Error::Numerical(_)) => return Err(Error::TrainingDiverged { epoch, learning_rate: lr }),
                other => other?,
            };
            loss_sum += loss * batch.len() as f64;
            for ((m, g), vel) in b.models_mut().iter_mut().zip(&grads).zip(&mut velocity) {
                let mut theta = m.params();
                for ((t, v), gi) in theta.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v - lr * gi;
                    *t += *v;
                }
                m.set_params(&theta)?;
                m.project_nonneg_in_place();
            }
            if let Some(cap) = cfg.lipschitz_cap {
                b.enforce_lipschitz_cap(cap, lo, hi);
            }
        }
        let train_mse = raw_mse(&b, data.train_samples()).unwrap_or(f64::NAN);
        if !train_mse.is_finite() {
            return Err(Error::TrainingDiverged { epoch, learning_rate: lr });
        }
        let validation_mse = if data.validation.is_empty() { None } else { Some(raw_mse(&b, data.validation_samples())?) };
        let epoch_loss = loss_sum / order.len() as f64;
        let stats = EpochStats { epoch, epoch_loss, train_mse, validation_mse, lipschitz: b.lipschitz_bound(lo, hi) };
        log::debug!("{} epoch {epoch}: train {train_mse:.3e} val {validation_mse:?}", b.label);
        history.push(stats);
        lr *= cfg.lr_decay;
    }
    Ok((b, history))
}

/// Fresh bundle on `partition` (seeded from `cfg.seed`), trained on `data`.
#[allow(clippy::too_many_arguments)]
pub fn fit_bundle(
    label: &str,
    controllable: &[usize],
    partition: Partition,
    bx: &ReactiveBox,
    epsilon: f64,
    icnn: &IcnnConfig,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ControllerBundle, Vec<EpochStats>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = ControllerBundle::init(label, controllable.to_vec(), partition, icnn, bx.clone(), epsilon, &mut rng)?;
    train(&init, data, cfg)
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "epoch_loss", "train_mse", "validation_mse", "lipschitz"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.epoch_loss.to_string(),
            h.train_mse.to_string(),
            h.validation_mse.map(|v| v.to_string()).unwrap_or_default(),
            h.lipschitz.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
