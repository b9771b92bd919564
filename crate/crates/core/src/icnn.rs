//! Input convex neural networks.
//!
//! A model maps `x ∈ R^d` to a scalar `g(x)` through
//!
//! ```text
//! x̃    = s (x - offset)
//! z_0  = σ(W_x0 x̃ + b_0)
//! z_k  = σ(W_zk z_{k-1} + W_xk x̃ + b_k)        k = 1..H-1
//! g    = W_zH z_{H-1} + W_xH x̃ + b_H
//! ```
//!
//! with σ the β-softplus. `g` is convex in `x` as long as every `W_z` entry is
//! nonnegative: σ is convex and nondecreasing, and the `W_x` skip paths are
//! affine. All derivatives here are exact (hand-written reverse and
//! forward-over-reverse passes), no finite differences.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// β-softplus: `ln(1 + e^{βu}) / β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Softplus {
    pub beta: f64,
}

impl Softplus {
    #[inline]
    pub fn value(self, u: f64) -> f64 {
        let t = self.beta * u;
        if t > 30.0 {
            u + (-t).exp().ln_1p() / self.beta
        } else {
            t.exp().ln_1p() / self.beta
        }
    }

    #[inline]
    pub fn slope(self, u: f64) -> f64 {
        let t = self.beta * u;
        if t >= 0.0 {
            1.0 / (1.0 + (-t).exp())
        } else {
            let e = t.exp();
            e / (1.0 + e)
        }
    }

    /// `(value(u), slope(u))` from a single exponential.
    #[inline]
    pub fn value_and_slope(self, u: f64) -> (f64, f64) {
        let t = self.beta * u;
        let e = (-t.abs()).exp();
        let slope = if t >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        ((t.max(0.0) + e.ln_1p()) / self.beta, slope)
    }

    #[inline]
    pub fn curvature(self, u: f64) -> f64 {
        let s = self.slope(u);
        self.beta * s * (1.0 - s)
    }
}

/// One affine stage. The first hidden layer has no `w_z`; later layers carry
/// `w_x` only when skip connections are enabled (the output layer always has one).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w_z: Option<DMatrix<f64>>,
    pub w_x: Option<DMatrix<f64>>,
    pub b: DVector<f64>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.b.len()
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_z: self.w_z.as_ref().map(|m| DMatrix::zeros(m.nrows(), m.ncols())),
            w_x: self.w_x.as_ref().map(|m| DMatrix::zeros(m.nrows(), m.ncols())),
            b: DVector::zeros(self.b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnModel {
    input_dim: usize,
    /// Hidden layers followed by the scalar output layer.
    layers: Vec<Layer>,
    activation: Softplus,
    input_offset: f64,
    input_scale: f64,
    skip_connections: bool,
}

/// Architecture and preprocessing choices for a fresh model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct IcnnConfig {
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub input_offset: f64,
    pub input_scale: f64,
    pub skip_connections: bool,
}

impl Default for IcnnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            beta: 10.0,
            input_offset: 1.0,
            input_scale: 10.0,
            skip_connections: true,
        }
    }
}

/// Gradient with the same shape as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnGradient {
    pub layers: Vec<Layer>,
}

impl IcnnGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            flatten_layer(l, &mut out);
        }
        out
    }

    pub fn scale(&mut self, a: f64) {
        for l in &mut self.layers {
            if let Some(m) = &mut l.w_z {
                *m *= a;
            }
            if let Some(m) = &mut l.w_x {
                *m *= a;
            }
            l.b *= a;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }
}

fn flatten_layer(l: &Layer, out: &mut Vec<f64>) {
    if let Some(m) = &l.w_z {
        out.extend_from_slice(m.as_slice());
    }
    if let Some(m) = &l.w_x {
        out.extend_from_slice(m.as_slice());
    }
    out.extend_from_slice(l.b.as_slice());
}

/// Activations kept from a forward pass.
struct Trace {
    x_tilde: DVector<f64>,
    pre: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
}

impl IcnnModel {
    /// Random initialization: `W_x`, `b` uniform in ±1/√fan_in, `W_z` as
    /// |uniform| / fan_in so the model starts convex.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, cfg: &IcnnConfig, rng: &mut R) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("ICNN input dimension must be positive".into()));
        }
        if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
            return Err(Error::Config("ICNN needs at least one nonempty hidden layer".into()));
        }
        if !(cfg.beta > 0.0 && cfg.input_scale > 0.0) {
            return Err(Error::Config("beta and input_scale must be positive".into()));
        }
        let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
        let mut prev = 0usize;
        let widths: Vec<usize> = cfg.hidden.iter().copied().chain(std::iter::once(1)).collect();
        for (k, &w) in widths.iter().enumerate() {
            let is_output = k + 1 == widths.len();
            let has_wx = k == 0 || cfg.skip_connections || is_output;
            let fan_in = prev + if has_wx { input_dim } else { 0 };
            let s = 1.0 / (fan_in as f64).sqrt();
            let w_z = (k > 0).then(|| DMatrix::from_fn(w, prev, |_, _| rng.gen_range(-1.0f64..1.0).abs() / prev as f64));
            let w_x = has_wx.then(|| DMatrix::from_fn(w, input_dim, |_, _| rng.gen_range(-s..s)));
            let b = DVector::from_fn(w, |_, _| rng.gen_range(-s..s));
            layers.push(Layer { w_z, w_x, b });
            prev = w;
        }
        Ok(Self {
            input_dim,
            layers,
            activation: Softplus { beta: cfg.beta },
            input_offset: cfg.input_offset,
            input_scale: cfg.input_scale,
            skip_connections: cfg.skip_connections,
        })
    }

    /// Builds a model from explicit layers, checking shapes.
    pub fn from_layers(
        input_dim: usize,
        layers: Vec<Layer>,
        beta: f64,
        input_offset: f64,
        input_scale: f64,
    ) -> Result<Self> {
        let skip = layers.iter().skip(1).take(layers.len().saturating_sub(2)).all(|l| l.w_x.is_some());
        let model = Self {
            input_dim,
            layers,
            activation: Softplus { beta },
            input_offset,
            input_scale,
            skip_connections: skip,
        };
        model.validate()?;
        Ok(model)
    }

    /// A model whose parameters are all zero (g ≡ 0).
    pub fn zeros(input_dim: usize, cfg: &IcnnConfig) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut m = Self::init(input_dim, cfg, &mut rng)?;
        for l in &mut m.layers {
            *l = l.zeros_like();
        }
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("malformed ICNN: {m}")));
        if self.layers.len() < 2 {
            return bad("needs at least one hidden layer and an output layer".into());
        }
        if !(self.activation.beta > 0.0 && self.input_scale > 0.0) {
            return bad("beta and input_scale must be positive".into());
        }
        let mut prev = 0usize;
        for (k, l) in self.layers.iter().enumerate() {
            let w = l.b.len();
            match (&l.w_z, k) {
                (None, 0) => {}
                (Some(_), 0) => return bad("first layer cannot have w_z".into()),
                (None, _) => return bad(format!("layer {k} is missing w_z")),
                (Some(m), _) if m.shape() != (w, prev) => {
                    return bad(format!("layer {k} w_z is {:?}, expected {:?}", m.shape(), (w, prev)))
                }
                _ => {}
            }
            match &l.w_x {
                Some(m) if m.shape() != (w, self.input_dim) => {
                    return bad(format!("layer {k} w_x is {:?}, expected {:?}", m.shape(), (w, self.input_dim)))
                }
                None if k == 0 || k + 1 == self.layers.len() => return bad(format!("layer {k} is missing w_x")),
                _ => {}
            }
            prev = w;
        }
        if prev != 1 {
            return bad("output layer must have width 1".into());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn beta(&self) -> f64 {
        self.activation.beta
    }

    pub fn input_offset(&self) -> f64 {
        self.input_offset
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn skip_connections(&self) -> bool {
        self.skip_connections
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            flatten_layer(l, &mut out);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            for m in [l.w_z.as_mut(), l.w_x.as_mut()].into_iter().flatten() {
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[i..i + n]);
                i += n;
            }
            let n = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[i..i + n]);
            i += n;
        }
        Ok(())
    }

    /// True when every `W_z` entry is nonnegative.
    pub fn is_convex_by_construction(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.w_z.as_ref())
            .all(|m| m.iter().all(|&v| v >= 0.0))
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "ICNN expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite ICNN input".into()));
        }
        Ok(())
    }

    fn run(&self, x: &DVector<f64>) -> (Trace, f64) {
        let x_tilde = x.map(|v| self.input_scale * (v - self.input_offset));
        let hidden = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(hidden);
        let mut z: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        for l in &self.layers[..hidden] {
            let mut p = l.b.clone();
            if let Some(wz) = &l.w_z {
                p.gemv(1.0, wz, z.last().expect("previous layer"), 1.0);
            }
            if let Some(wx) = &l.w_x {
                p.gemv(1.0, wx, &x_tilde, 1.0);
            }
            z.push(p.map(|u| self.activation.value(u)));
            pre.push(p);
        }
        let out = &self.layers[hidden];
        let mut g = out.b[0];
        g += out.w_z.as_ref().expect("output w_z").row(0).dot(&z[hidden - 1].transpose());
        if let Some(wx) = &out.w_x {
            g += wx.row(0).dot(&x_tilde.transpose());
        }
        (Trace { x_tilde, pre, z }, g)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_input(x)?;
        let (_, g) = self.run(x);
        if !g.is_finite() {
            return Err(Error::Numerical("ICNN output is not finite".into()));
        }
        Ok(g)
    }

    /// Scaled input and the activation slope of every hidden unit. Cheaper than
    /// [`run`](Self::run) when only gradients are needed: the last hidden
    /// layer's values never enter `∇g`.
    fn slopes(&self, x: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>) {
        let x_tilde = x.map(|v| self.input_scale * (v - self.input_offset));
        let hidden = self.layers.len() - 1;
        let mut slopes = Vec::with_capacity(hidden);
        let mut z = DVector::zeros(0);
        for (k, l) in self.layers[..hidden].iter().enumerate() {
            let mut p = l.b.clone();
            if let Some(wz) = &l.w_z {
                p.gemv(1.0, wz, &z, 1.0);
            }
            if let Some(wx) = &l.w_x {
                p.gemv(1.0, wx, &x_tilde, 1.0);
            }
            if k + 1 < hidden {
                let mut sl = DVector::zeros(p.len());
                for (u, d) in p.iter_mut().zip(sl.iter_mut()) {
                    (*u, *d) = self.activation.value_and_slope(*u);
                }
                z = p;
                slopes.push(sl);
            } else {
                slopes.push(p.map(|u| self.activation.slope(u)));
            }
        }
        (x_tilde, slopes)
    }

    fn trace_slopes(&self, tr: &Trace) -> Vec<DVector<f64>> {
        tr.pre.iter().map(|p| p.map(|u| self.activation.slope(u))).collect()
    }

    /// Reverse pass from the scalar output; returns dg/dpre for every hidden layer.
    fn backprop(&self, slopes: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let hidden = self.layers.len() - 1;
        let mut dpre = vec![DVector::zeros(0); hidden];
        let mut dz: DVector<f64> = self.layers[hidden].w_z.as_ref().expect("output w_z").row(0).transpose();
        for k in (0..hidden).rev() {
            let d = dz.component_mul(&slopes[k]);
            if k > 0 {
                dz = self.layers[k].w_z.as_ref().expect("w_z").tr_mul(&d);
            }
            dpre[k] = d;
        }
        dpre
    }

    /// `∇_x g(x)`.
    pub fn input_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let (_, slopes) = self.slopes(x);
        let dpre = self.backprop(&slopes);
        let hidden = self.layers.len() - 1;
        let mut gx = match &self.layers[hidden].w_x {
            Some(wx) => wx.row(0).transpose(),
            None => DVector::zeros(self.input_dim),
        };
        for (l, d) in self.layers[..hidden].iter().zip(&dpre) {
            if let Some(wx) = &l.w_x {
                gx.gemv_tr(1.0, wx, d, 1.0);
            }
        }
        gx *= self.input_scale;
        if gx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("ICNN gradient is not finite".into()));
        }
        Ok(gx)
    }

    /// Gradient of `upstream · g(x)` with respect to every parameter.
    pub fn param_gradient(&self, x: &DVector<f64>, upstream: f64) -> Result<IcnnGradient> {
        self.check_input(x)?;
        let (tr, _) = self.run(x);
        let dpre = self.backprop(&self.trace_slopes(&tr));
        let hidden = self.layers.len() - 1;
        let mut grad = IcnnGradient { layers: self.layers.iter().map(Layer::zeros_like).collect() };
        for k in 0..hidden {
            let d = &dpre[k] * upstream;
            let gl = &mut grad.layers[k];
            if let Some(m) = &mut gl.w_z {
                m.ger(1.0, &d, &tr.z[k - 1], 0.0);
            }
            if let Some(m) = &mut gl.w_x {
                m.ger(1.0, &d, &tr.x_tilde, 0.0);
            }
            gl.b = d;
        }
        let gl = &mut grad.layers[hidden];
        if let Some(m) = &mut gl.w_z {
            m.row_mut(0).copy_from(&(&tr.z[hidden - 1] * upstream).transpose());
        }
        if let Some(m) = &mut gl.w_x {
            m.row_mut(0).copy_from(&(&tr.x_tilde * upstream).transpose());
        }
        gl.b[0] = upstream;
        Ok(grad)
    }

    /// Gradient with respect to the parameters of `cᵀ ∇_x g(x)`.
    ///
    /// This is the second-order term needed when a loss depends on the input
    /// gradient. The directional derivative along `c` is carried forward as a
    /// tangent next to every activation, then the pair is differentiated in
    /// reverse. Results are added into `acc`.
    pub fn accumulate_input_gradient_vjp(&self, x: &DVector<f64>, c: &DVector<f64>, acc: &mut IcnnGradient) -> Result<()> {
        self.check_input(x)?;
        if c.len() != self.input_dim {
            return Err(Error::Dimension(format!("direction has {} entries, expected {}", c.len(), self.input_dim)));
        }
        let sp = self.activation;
        let hidden = self.layers.len() - 1;
        let (tr, _) = self.run(x);
        let slopes = self.trace_slopes(&tr);
        let t = c * self.input_scale;

        // forward tangents
        let mut tpre: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        let mut tz: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        for (k, l) in self.layers[..hidden].iter().enumerate() {
            let mut tp = DVector::zeros(l.b.len());
            if let Some(wz) = &l.w_z {
                tp.gemv(1.0, wz, &tz[k - 1], 0.0);
            }
            if let Some(wx) = &l.w_x {
                tp.gemv(1.0, wx, &t, 1.0);
            }
            tz.push(tp.component_mul(&slopes[k]));
            tpre.push(tp);
        }

        // reverse
        let out = &self.layers[hidden];
        let wz_out = out.w_z.as_ref().expect("output w_z");
        {
            let ga = &mut acc.layers[hidden];
            if let Some(m) = &mut ga.w_z {
                let mut row = m.row_mut(0);
                row += tz[hidden - 1].transpose();
            }
            if let Some(m) = &mut ga.w_x {
                let mut row = m.row_mut(0);
                row += t.transpose();
            }
        }
        let mut dtz: DVector<f64> = wz_out.row(0).transpose();
        let mut dz: DVector<f64> = DVector::zeros(dtz.len());
        for k in (0..hidden).rev() {
            let sl = &slopes[k];
            let dtp = dtz.component_mul(sl);
            // σ'' = β σ'(1 − σ')
            let mut dp = DVector::from_fn(sl.len(), |i, _| {
                sp.beta * sl[i] * (1.0 - sl[i]) * tpre[k][i] * dtz[i] + sl[i] * dz[i]
            });
            let l = &self.layers[k];
            let ga = &mut acc.layers[k];
            if let (Some(wz), Some(gwz)) = (&l.w_z, &mut ga.w_z) {
                gwz.ger(1.0, &dtp, &tz[k - 1], 1.0);
                gwz.ger(1.0, &dp, &tr.z[k - 1], 1.0);
                dtz = wz.tr_mul(&dtp);
                dz = wz.tr_mul(&dp);
            }
            if let Some(gwx) = &mut ga.w_x {
                gwx.ger(1.0, &dtp, &t, 1.0);
                gwx.ger(1.0, &dp, &tr.x_tilde, 1.0);
            }
            ga.b += &dp;
            // keep borrowck happy when k == 0
            dp.fill(0.0);
        }
        Ok(())
    }

    pub fn input_gradient_vjp(&self, x: &DVector<f64>, c: &DVector<f64>) -> Result<IcnnGradient> {
        let mut acc = self.zero_gradient();
        self.accumulate_input_gradient_vjp(x, c, &mut acc)?;
        Ok(acc)
    }

    pub fn zero_gradient(&self) -> IcnnGradient {
        IcnnGradient { layers: self.layers.iter().map(Layer::zeros_like).collect() }
    }

    /// Clamps every `W_z` entry to be nonnegative; other parameters are untouched.
    pub fn project_params_nonneg(&self) -> Self {
        let mut m = self.clone();
        m.project_nonneg_in_place();
        m
    }

    pub fn project_nonneg_in_place(&mut self) {
        for l in &mut self.layers {
            if let Some(wz) = &mut l.w_z {
                wz.apply(|v| *v = v.max(0.0));
            }
        }
    }

    /// Multiplies the output layer's `W_z` row by `factor`. This scales the
    /// curvature of `g` (and the Lipschitz bound of `∇g`) by exactly `factor`
    /// while leaving the affine skip term alone.
    pub fn scale_curvature(&mut self, factor: f64) {
        let out = self.layers.last_mut().expect("output layer");
        if let Some(wz) = &mut out.w_z {
            *wz *= factor;
        }
    }

    /// Upper bound on the Lipschitz constant of `∇g` over the box
    /// `[lo, hi]^d`.
    ///
    /// The Hessian of `g` is `Σ_k J_kᵀ diag(σ''(pre_k) ⊙ ∂g/∂z_k) J_k` with `J_k`
    /// the Jacobian of layer k's pre-activation. Interval propagation over the
    /// box bounds σ' and σ'' per unit, which bounds `∂g/∂z_k` (nonnegative) and
    /// the operator norms of `J_k`.
    pub fn lipschitz_bound(&self, lo: f64, hi: f64) -> f64 {
        if !(lo.is_finite() && hi.is_finite()) {
            return self.lipschitz_bound_global();
        }
        let sp = self.activation;
        let hidden = self.layers.len() - 1;
        let s = self.input_scale;
        let xc = s * (0.5 * (lo + hi) - self.input_offset);
        let xr = s * 0.5 * (hi - lo).abs();
        let centre = DVector::from_element(self.input_dim, xc);
        let radius = DVector::from_element(self.input_dim, xr);

        let mut slope_max: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        let mut curv_max: Vec<DVector<f64>> = Vec::with_capacity(hidden);
        let mut z_lo = DVector::zeros(0);
        let mut z_hi = DVector::zeros(0);
        for l in &self.layers[..hidden] {
            let mut plo = l.b.clone();
            let mut phi = l.b.clone();
            if let Some(wx) = &l.w_x {
                let c = wx * &centre;
                let r = wx.abs() * &radius;
                plo += &c - &r;
                phi += &c + &r;
            }
            if let Some(wz) = &l.w_z {
                // W_z may be negative in a fault-injected model
                let pos = wz.map(|v| v.max(0.0));
                let neg = wz.map(|v| v.min(0.0));
                plo += &pos * &z_lo + &neg * &z_hi;
                phi += &pos * &z_hi + &neg * &z_lo;
            }
            slope_max.push(phi.map(|u| sp.slope(u)));
            curv_max.push(DVector::from_fn(plo.len(), |i, _| {
                if plo[i] <= 0.0 && phi[i] >= 0.0 {
                    sp.beta / 4.0
                } else if phi[i] < 0.0 {
                    sp.curvature(phi[i])
                } else {
                    sp.curvature(plo[i])
                }
            }));
            z_lo = plo.map(|u| sp.value(u));
            z_hi = phi.map(|u| sp.value(u));
        }
        self.combine_bounds(&slope_max, &curv_max)
    }

    /// Region-free version of [`lipschitz_bound`](Self::lipschitz_bound) using
    /// σ' ≤ 1 and σ'' ≤ β/4 everywhere.
    pub fn lipschitz_bound_global(&self) -> f64 {
        let hidden = &self.layers[..self.layers.len() - 1];
        let slope_max: Vec<_> = hidden.iter().map(|l| DVector::from_element(l.out_dim(), 1.0)).collect();
        let curv_max: Vec<_> = hidden
            .iter()
            .map(|l| DVector::from_element(l.out_dim(), self.activation.beta / 4.0))
            .collect();
        self.combine_bounds(&slope_max, &curv_max)
    }

    fn combine_bounds(&self, slope_max: &[DVector<f64>], curv_max: &[DVector<f64>]) -> f64 {
        let hidden = self.layers.len() - 1;
        let s = self.input_scale;

        // bounds on |∂g/∂z_k|
        let mut sens: Vec<DVector<f64>> = vec![DVector::zeros(0); hidden];
        sens[hidden - 1] = self.layers[hidden].w_z.as_ref().expect("w_z").row(0).transpose().abs();
        for k in (1..hidden).rev() {
            let wz = self.layers[k].w_z.as_ref().expect("w_z").abs();
            sens[k - 1] = wz.tr_mul(&sens[k].component_mul(&slope_max[k]));
        }

        // bounds on ‖J_k‖₂
        let mut jac = Vec::with_capacity(hidden);
        for (k, l) in self.layers[..hidden].iter().enumerate() {
            let mut j = l.w_x.as_ref().map(spectral_norm).unwrap_or(0.0);
            if let Some(wz) = &l.w_z {
                let scaled = wz.abs() * DMatrix::from_diagonal(&slope_max[k - 1]);
                j += spectral_norm(&scaled) * jac[k - 1];
            }
            jac.push(j);
        }

        let mut coarse = 0.0;
        for k in 0..hidden {
            let peak = sens[k].component_mul(&curv_max[k]).max();
            coarse += peak * jac[k] * jac[k];
        }

        // entrywise bounds A_k ≥ |J_k|: ‖H‖ ≤ λ_max(Σ_k A_kᵀ diag(sens⊙curv) A_k)
        let d = self.input_dim;
        let mut m = DMatrix::zeros(d, d);
        let mut a_prev: Option<DMatrix<f64>> = None;
        for (k, l) in self.layers[..hidden].iter().enumerate() {
            let mut a = l.w_x.as_ref().map(|w| w.abs()).unwrap_or_else(|| DMatrix::zeros(l.out_dim(), d));
            if let (Some(wz), Some(prev)) = (&l.w_z, &a_prev) {
                a += wz.abs() * DMatrix::from_diagonal(&slope_max[k - 1]) * prev;
            }
            let w = sens[k].component_mul(&curv_max[k]);
            m += a.transpose() * DMatrix::from_diagonal(&w) * &a;
            a_prev = Some(a);
        }
        // m is PSD, so its Frobenius norm bounds λ_max when the solver gives up
        let fine = if m.iter().all(|v| v.is_finite()) {
            match m.clone().try_symmetric_eigen(f64::EPSILON, EIGEN_MAX_ITER) {
                Some(e) => e.eigenvalues.max().max(0.0),
                None => m.norm(),
            }
        } else {
            f64::INFINITY
        };
        coarse.min(fine) * s * s
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            input_dim: self.input_dim,
            activation: ActivationSpec { kind: "softplus".into(), beta: self.activation.beta },
            input_offset: self.input_offset,
            input_scale: self.input_scale,
            skip_connections: self.skip_connections,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    w_z: l.w_z.as_ref().map(MatrixSpec::from_matrix),
                    w_x: l.w_x.as_ref().map(MatrixSpec::from_matrix),
                    b: l.b.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        if cp.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                cp.format_version
            )));
        }
        if cp.activation.kind != "softplus" {
            return Err(Error::Config(format!("unsupported activation {:?}", cp.activation.kind)));
        }
        let layers = cp
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    w_z: l.w_z.as_ref().map(MatrixSpec::to_matrix).transpose()?,
                    w_x: l.w_x.as_ref().map(MatrixSpec::to_matrix).transpose()?,
                    b: DVector::from_vec(l.b.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            input_dim: cp.input_dim,
            layers,
            activation: Softplus { beta: cp.activation.beta },
            input_offset: cp.input_offset,
            input_scale: cp.input_scale,
            skip_connections: cp.skip_connections,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if !m.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    // Frobenius norm is an upper bound if the iteration does not converge
    match nalgebra::SVD::try_new(m.clone(), false, false, f64::EPSILON, EIGEN_MAX_ITER) {
        Some(svd) => svd.singular_values.max(),
        None => m.norm(),
    }
}

const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ActivationSpec {
    pub kind: String,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixSpec {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries, one inner list per row.
    pub data: Vec<Vec<f64>>,
}

impl MatrixSpec {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows || self.data.iter().any(|r| r.len() != self.cols) {
            return Err(Error::Config(format!(
                "matrix data does not match declared shape {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| self.data[i][j]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub w_z: Option<MatrixSpec>,
    pub w_x: Option<MatrixSpec>,
    pub b: Vec<f64>,
}

/// On-disk form of a model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_dim: usize,
    pub activation: ActivationSpec,
    pub input_offset: f64,
    pub input_scale: f64,
    pub skip_connections: bool,
    pub layers: Vec<LayerSpec>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> IcnnConfig {
        IcnnConfig { hidden: vec![4, 3], ..IcnnConfig::default() }
    }

    #[test]
    fn zero_model_is_flat() {
        let m = IcnnModel::zeros(3, &IcnnConfig::default()).unwrap();
        let x = DVector::from_vec(vec![0.95, 1.0, 1.07]);
        assert_eq!(m.forward(&x).unwrap(), 0.0);
        assert!(m.input_gradient(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let sp = Softplus { beta: 10.0 };
        assert_abs_diff_eq!(sp.value(100.0), 100.0, epsilon = 1e-12);
        assert_eq!(sp.value(-100.0), 0.0);
        assert_abs_diff_eq!(sp.slope(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sp.curvature(0.0), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn wrong_input_dimension_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = IcnnModel::init(2, &small_cfg(), &mut rng).unwrap();
        assert!(matches!(m.forward(&DVector::zeros(3)), Err(Error::Dimension(_))));
        assert!(matches!(m.forward(&DVector::from_vec(vec![f64::NAN, 1.0])), Err(Error::Numerical(_))));
    }

    #[test]
    fn projection_clamps_only_wz() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = IcnnModel::init(2, &small_cfg(), &mut rng).unwrap();
        m.layers_mut()[1].w_z.as_mut().unwrap()[(0, 0)] = -0.3;
        m.layers_mut()[1].w_x.as_mut().unwrap()[(0, 0)] = -0.3;
        let p = m.project_params_nonneg();
        assert_eq!(p.layers()[1].w_z.as_ref().unwrap()[(0, 0)], 0.0);
        assert_eq!(p.layers()[1].w_x.as_ref().unwrap()[(0, 0)], -0.3);
        assert!(p.is_convex_by_construction());
        assert!(!m.is_convex_by_construction());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = IcnnModel::init(3, &small_cfg(), &mut rng).unwrap();
        let mut other = IcnnModel::zeros(3, &small_cfg()).unwrap();
        other.set_params(&m.params()).unwrap();
        assert_eq!(m, other);
    }

    #[test]
    fn checkpoint_rejects_future_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cp = IcnnModel::init(2, &small_cfg(), &mut rng).unwrap().to_checkpoint();
        cp.format_version = 99;
        assert!(IcnnModel::from_checkpoint(&cp).is_err());
    }

    #[test]
    fn no_skip_model_has_no_hidden_wx() {
        let cfg = IcnnConfig { skip_connections: false, hidden: vec![3, 3, 3], ..IcnnConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = IcnnModel::init(2, &cfg, &mut rng).unwrap();
        assert!(m.layers()[1].w_x.is_none());
        assert!(m.layers()[2].w_x.is_none());
        assert!(m.layers()[3].w_x.is_some());
        let back = IcnnModel::from_json(&m.to_json()).unwrap();
        assert!(!back.skip_connections());
    }

    #[test]
    fn curvature_scaling_scales_bound_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = IcnnModel::init(3, &small_cfg(), &mut rng).unwrap();
        let before = m.lipschitz_bound(0.9, 1.1);
        m.scale_curvature(0.25);
        assert_abs_diff_eq!(m.lipschitz_bound(0.9, 1.1), 0.25 * before, epsilon = 1e-12 * before.max(1.0));
    }
}
