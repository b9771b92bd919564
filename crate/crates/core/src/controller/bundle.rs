use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Partition;
use crate::error::{Error, Result};
use crate::icnn::{IcnnConfig, IcnnModel};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Reactive-power limits over the controllable buses, in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactiveBox {
    q_min: DVector<f64>,
    q_max: DVector<f64>,
}

impl ReactiveBox {
    pub fn new(q_min: DVector<f64>, q_max: DVector<f64>) -> Result<Self> {
        if q_min.len() != q_max.len() {
            return Err(Error::Dimension(format!(
                "box bounds have {} and {} entries",
                q_min.len(),
                q_max.len()
            )));
        }
        if let Some(i) = (0..q_min.len()).find(|&i| !(q_min[i] <= q_max[i])) {
            return Err(Error::Config(format!("box entry {i}: q_min {} > q_max {}", q_min[i], q_max[i])));
        }
        Ok(Self { q_min, q_max })
    }

    /// `-q_lim ≤ q ≤ q_lim`.
    pub fn symmetric(q_lim: DVector<f64>) -> Result<Self> {
        Self::new(-&q_lim, q_lim)
    }

    /// Symmetric box from limits in MVar.
    pub fn symmetric_mvar(q_lim_mvar: &[f64], base_mva: f64) -> Result<Self> {
        Self::symmetric(DVector::from_iterator(q_lim_mvar.len(), q_lim_mvar.iter().map(|q| q / base_mva)))
    }

    /// Limits of the 13 inverters on the bundled 49-bus network, in MVar.
    pub const UCSD49_Q_LIM_MVAR: [f64; 13] = [2.0, 2.0, 2.0, 2.0, 2.0, 5.0, 2.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0];

    pub fn ucsd49(base_mva: f64) -> Self {
        Self::symmetric_mvar(&Self::UCSD49_Q_LIM_MVAR, base_mva).expect("valid limits")
    }

    pub fn len(&self) -> usize {
        self.q_min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_min.is_empty()
    }

    pub fn q_min(&self) -> &DVector<f64> {
        &self.q_min
    }

    pub fn q_max(&self) -> &DVector<f64> {
        &self.q_max
    }

    pub fn contains(&self, q: &DVector<f64>) -> bool {
        q.len() == self.len() && q.iter().enumerate().all(|(i, &v)| self.q_min[i] <= v && v <= self.q_max[i])
    }

    pub fn clamp(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(q.len(), |i, _| q[i].clamp(self.q_min[i], self.q_max[i]))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            if self.q_min[i] == self.q_max[i] {
                self.q_min[i]
            } else {
                rng.gen_range(self.q_min[i]..=self.q_max[i])
            }
        })
    }
}

/// `min(1, 2 / (1 + L²‖X‖²))`, the largest stepsize the stability theorem allows.
pub fn max_stable_stepsize(lipschitz: f64, x_norm: f64) -> f64 {
    let lx = lipschitz * x_norm;
    (2.0 / (1.0 + lx * lx)).min(1.0)
}

/// Outcome of a stability certification, stored with the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub ok: bool,
    pub l_analytic: f64,
    pub l_sampled: f64,
    pub x_norm: f64,
    pub eps_bound: f64,
    pub eps_used: f64,
    pub safety_factor: f64,
    pub region: [f64; 2],
    pub monotonicity_pairs: usize,
    pub monotonicity_violations: usize,
    pub reasons: Vec<String>,
}

/// Lipschitz estimates for `φ` over a voltage box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    /// Largest sampled difference quotient.
    pub sampled: f64,
    /// Layer-norm upper bound.
    pub analytic: f64,
}

/// Per-subgraph ICNNs over a partition of the controllable buses, together with
/// the reactive box and stepsize. Vectors over 𝒞 follow the order of
/// `controllable`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerBundle {
    pub label: String,
    controllable: Vec<usize>,
    partition: Partition,
    members: Vec<Vec<usize>>,
    models: Vec<IcnnModel>,
    bx: ReactiveBox,
    epsilon: f64,
    lipschitz: Option<f64>,
    certification: Option<Certification>,
}

impl ControllerBundle {
    pub fn new(
        label: impl Into<String>,
        controllable: Vec<usize>,
        partition: Partition,
        models: Vec<IcnnModel>,
        bx: ReactiveBox,
        epsilon: f64,
    ) -> Result<Self> {
        let partition = Partition::new(partition.subgraphs().to_vec(), &controllable)?;
        if models.len() != partition.len() {
            return Err(Error::Dimension(format!(
                "{} models for {} subgraphs",
                models.len(),
                partition.len()
            )));
        }
        if bx.len() != controllable.len() {
            return Err(Error::Dimension(format!(
                "box has {} entries, {} controllable buses",
                bx.len(),
                controllable.len()
            )));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let members: Vec<Vec<usize>> = partition
            .subgraphs()
            .iter()
            .map(|s| s.iter().map(|b| controllable.iter().position(|c| c == b).expect("covered")).collect())
            .collect();
        for (k, (m, s)) in models.iter().zip(&members).enumerate() {
            if m.input_dim() != s.len() {
                return Err(Error::Dimension(format!(
                    "model {k} takes {} inputs, subgraph has {} buses",
                    m.input_dim(),
                    s.len()
                )));
            }
        }
        Ok(Self {
            label: label.into(),
            controllable,
            partition,
            members,
            models,
            bx,
            epsilon,
            lipschitz: None,
            certification: None,
        })
    }

    /// Fresh randomly initialized ICNNs, one per subgraph.
    pub fn init<R: Rng + ?Sized>(
        label: impl Into<String>,
        controllable: Vec<usize>,
        partition: Partition,
        cfg: &IcnnConfig,
        bx: ReactiveBox,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let models = partition
            .subgraphs()
            .iter()
            .map(|s| IcnnModel::init(s.len(), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(label, controllable, partition, models, bx, epsilon)
    }

    /// All-zero ICNNs, so `φ ≡ 0`.
    pub fn zeros(
        label: impl Into<String>,
        controllable: Vec<usize>,
        partition: Partition,
        cfg: &IcnnConfig,
        bx: ReactiveBox,
        epsilon: f64,
    ) -> Result<Self> {
        let models = partition
            .subgraphs()
            .iter()
            .map(|s| IcnnModel::zeros(s.len(), cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::new(label, controllable, partition, models, bx, epsilon)
    }

    pub fn controllable(&self) -> &[usize] {
        &self.controllable
    }

    pub fn dim(&self) -> usize {
        self.controllable.len()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Positions (into the 𝒞 vector) of each subgraph's buses.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn models(&self) -> &[IcnnModel] {
        &self.models
    }

    /// Mutable access for training. Invalidates cached Lipschitz constant and
    /// certification.
    pub fn models_mut(&mut self) -> &mut [IcnnModel] {
        self.lipschitz = None;
        self.certification = None;
        &mut self.models
    }

    pub fn reactive_box(&self) -> &ReactiveBox {
        &self.bx
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
        }
        self.epsilon = epsilon;
        self.certification = None;
        Ok(())
    }

    pub fn cached_lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn set_cached_lipschitz(&mut self, l: f64) {
        self.lipschitz = Some(l);
    }

    pub fn certification(&self) -> Option<&Certification> {
        self.certification.as_ref()
    }

    pub fn is_certified(&self) -> bool {
        self.certification.as_ref().is_some_and(|c| c.ok)
    }

    pub fn set_certification(&mut self, cert: Certification) {
        self.lipschitz = Some(cert.l_analytic);
        self.certification = Some(cert);
    }

    fn check_dim(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!("{what} has {} entries, expected {}", v.len(), self.dim())));
        }
        Ok(())
    }

    /// `−Σ_ℓ ∇g_ℓ(v_{M_ℓ})`, scattered back onto 𝒞.
    pub fn phi_raw(&self, v_c: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v_c, "v_c")?;
        let mut out = DVector::zeros(self.dim());
        for (m, idx) in self.models.iter().zip(&self.members) {
            let local = DVector::from_iterator(idx.len(), idx.iter().map(|&i| v_c[i]));
            let g = m.input_gradient(&local)?;
            for (k, &i) in idx.iter().enumerate() {
                out[i] -= g[k];
            }
        }
        Ok(out)
    }

    /// `φ_raw` clamped into the reactive box.
    pub fn phi(&self, v_c: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.bx.clamp(&self.phi_raw(v_c)?))
    }

    /// `q + ε(φ(v) − q)`. Rounding cannot leave the box: the result is clamped
    /// again, which is a no-op in exact arithmetic.
    pub fn control_step(&self, q_c: &DVector<f64>, v_c: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(q_c, "q_c")?;
        if !self.bx.contains(q_c) {
            return Err(Error::Precondition("q_c lies outside the reactive box".into()));
        }
        let target = self.phi(v_c)?;
        let next = q_c + (target - q_c) * self.epsilon;
        Ok(self.bx.clamp(&next))
    }

    /// Per-bus budget terms `b_i = (φ_i(v) − φ_i(v'))(v_i − v'_i)` of `φ_raw`.
    pub fn budgets(&self, v: &DVector<f64>, v_prime: &DVector<f64>) -> Result<DVector<f64>> {
        let a = self.phi_raw(v)?;
        let b = self.phi_raw(v_prime)?;
        Ok((a - b).component_mul(&(v - v_prime)))
    }

    /// Analytic bound for each model over `[lo, hi]^d`.
    pub fn model_lipschitz_bounds(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.models.iter().map(|m| m.lipschitz_bound(lo, hi)).collect()
    }

    /// Analytic Lipschitz bound of `φ` over `[lo, hi]^{|𝒞|}`.
    ///
    /// The Jacobian of `φ_raw` is `−Σ_ℓ P_ℓᵀ H_ℓ P_ℓ` with each `H_ℓ` PSD and
    /// `‖H_ℓ‖ ≤ L_ℓ`, so it is dominated by the diagonal `Σ_ℓ L_ℓ P_ℓᵀ P_ℓ`,
    /// whose norm is the largest per-bus sum. The box clamp is nonexpansive.
    pub fn lipschitz_bound(&self, lo: f64, hi: f64) -> f64 {
        let per_model = self.model_lipschitz_bounds(lo, hi);
        self.per_bus_sums(&per_model).into_iter().fold(0.0, f64::max)
    }

    fn per_bus_sums(&self, per_model: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim()];
        for (l, idx) in per_model.iter().zip(&self.members) {
            for &i in idx {
                sums[i] += l;
            }
        }
        sums
    }

    /// Rescales model curvature so the analytic bound over `[lo, hi]` is at
    /// most `cap`. Each model is shrunk by the tightest factor among its buses,
    /// which keeps every per-bus sum under the cap. Returns the factors.
    pub fn enforce_lipschitz_cap(&mut self, cap: f64, lo: f64, hi: f64) -> Vec<f64> {
        let per_model = self.model_lipschitz_bounds(lo, hi);
        let sums = self.per_bus_sums(&per_model);
        let factors: Vec<f64> = self
            .members
            .iter()
            .map(|idx| {
                idx.iter()
                    .map(|&i| if sums[i] > cap { cap / sums[i] } else { 1.0 })
                    .fold(1.0, f64::min)
            })
            .collect();
        let touched = factors.iter().any(|&f| f < 1.0);
        for (m, &f) in self.models.iter_mut().zip(&factors) {
            if f < 1.0 {
                m.scale_curvature(f);
            }
        }
        if touched {
            self.lipschitz = None;
            self.certification = None;
        }
        factors
    }

    /// Sampled difference quotients of `φ` over `[lo, hi]^{|𝒞|}` next to the
    /// analytic bound. Half of the pairs are close together to probe local
    /// curvature.
    pub fn estimate_lipschitz<R: Rng + ?Sized>(&self, lo: f64, hi: f64, n_samples: usize, rng: &mut R) -> Result<LipschitzEstimate> {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for k in 0..n_samples {
            let v = DVector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
            let w = if k % 2 == 0 {
                DVector::from_fn(d, |_, _| rng.gen_range(lo..=hi))
            } else {
                let step = 1e-3 * (hi - lo);
                DVector::from_fn(d, |i, _| (v[i] + rng.gen_range(-step..=step)).clamp(lo, hi))
            };
            let dv = (&v - &w).norm();
            if dv == 0.0 {
                continue;
            }
            let dphi = (self.phi(&v)? - self.phi(&w)?).norm();
            worst = worst.max(dphi / dv);
        }
        Ok(LipschitzEstimate { sampled: worst, analytic: self.lipschitz_bound(lo, hi) })
    }

    pub fn manifest(&self, base_mva: f64, model_files: Vec<String>) -> BundleManifest {
        BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            label: self.label.clone(),
            controllable: self.controllable.clone(),
            partition: self.partition.subgraphs().to_vec(),
            models: model_files,
            base_mva,
            q_min_mvar: self.bx.q_min.iter().map(|q| q * base_mva).collect(),
            q_max_mvar: self.bx.q_max.iter().map(|q| q * base_mva).collect(),
            epsilon: self.epsilon,
            lipschitz: self.lipschitz,
            certification: self.certification.clone(),
        }
    }

    /// Writes `bundle.json` plus one checkpoint per subgraph into `dir` and
    /// returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, base_mva: f64) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.models.len());
        for (k, m) in self.models.iter().enumerate() {
            let name = format!("g{k}.json");
            m.save(dir.join(&name))?;
            files.push(name);
        }
        let path = dir.join("bundle.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest(base_mva, files))?)?;
        Ok(path)
    }

    /// Loads a bundle from its manifest. Model paths are resolved relative to
    /// the manifest's directory. Returns the bundle and the manifest's base MVA.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<(Self, f64)> {
        let manifest_path = manifest_path.as_ref();
        let man: BundleManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        if man.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported bundle format version {} (expected {BUNDLE_FORMAT_VERSION})",
                man.format_version
            )));
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let models = man
            .models
            .iter()
            .map(|f| IcnnModel::load(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let to_pu = |v: &[f64]| DVector::from_iterator(v.len(), v.iter().map(|q| q / man.base_mva));
        let bx = ReactiveBox::new(to_pu(&man.q_min_mvar), to_pu(&man.q_max_mvar))?;
        let partition = Partition::new(man.partition.clone(), &man.controllable)?;
        let mut bundle = Self::new(man.label, man.controllable, partition, models, bx, man.epsilon)?;
        bundle.lipschitz = man.lipschitz;
        bundle.certification = man.certification;
        Ok((bundle, man.base_mva))
    }
}

/// On-disk bundle description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub label: String,
    pub controllable: Vec<usize>,
    pub partition: Vec<Vec<usize>>,
    /// Checkpoint files, relative to the manifest.
    pub models: Vec<String>,
    pub base_mva: f64,
    pub q_min_mvar: Vec<f64>,
    pub q_max_mvar: Vec<f64>,
    pub epsilon: f64,
    pub lipschitz: Option<f64>,
    pub certification: Option<Certification>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stepsize_law_values() {
        assert_eq!(max_stable_stepsize(0.0, 0.57), 1.0);
        assert_eq!(max_stable_stepsize(2.0, 1.0), 0.4);
        assert_eq!(max_stable_stepsize(1.0, 1.0), 1.0);
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        let lo = DVector::from_vec(vec![0.0, 1.0]);
        let hi = DVector::from_vec(vec![1.0, 0.5]);
        assert!(ReactiveBox::new(lo, hi).is_err());
    }

    #[test]
    fn box_clamps_into_limits() {
        let b = ReactiveBox::ucsd49(10.0);
        let mut q = DVector::zeros(13);
        q[5] = 9.9;
        q[0] = -1.0;
        let c = b.clamp(&q);
        assert_eq!(c[5], 0.5);
        assert_eq!(c[0], -0.2);
        assert!(b.contains(&c));
    }

    #[test]
    fn zero_bundle_steps_toward_zero() {
        let c = vec![3, 5];
        let bx = ReactiveBox::symmetric(DVector::from_element(2, 1.0)).unwrap();
        let b = ControllerBundle::zeros("z", c.clone(), Partition::singletons(&c), &IcnnConfig::default(), bx, 0.1).unwrap();
        let v = DVector::from_element(2, 1.05);
        assert_eq!(b.phi_raw(&v).unwrap(), DVector::zeros(2));
        let q = DVector::from_element(2, 1.0);
        let next = b.control_step(&q, &v).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15);
        assert!(b.control_step(&DVector::from_element(2, 2.0), &v).is_err());
    }

    #[test]
    fn model_count_and_dims_are_checked() {
        let c = vec![1, 2];
        let bx = ReactiveBox::symmetric(DVector::from_element(2, 1.0)).unwrap();
        let m = IcnnModel::zeros(1, &IcnnConfig::default()).unwrap();
        let err = ControllerBundle::new("x", c.clone(), Partition::full(&c), vec![m], bx, 0.1);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
