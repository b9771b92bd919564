//! LinDistFlow sensitivity matrices `v = R p + X q + 1`.

use nalgebra::{DMatrix, DVector};

use super::network::GridNetwork;
use super::scenario::PowerScenario;
use crate::error::{Error, Result};

/// Row bookkeeping between bus ids and matrix rows.
///
/// Rows are ordered by bus id, so bus `b` lives in row `b - 1`. The
/// controllable/uncontrollable split is kept as explicit id lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusIndex {
    n: usize,
    controllable: Vec<usize>,
    uncontrollable: Vec<usize>,
}

impl BusIndex {
    pub fn new(net: &GridNetwork) -> Self {
        Self {
            n: net.n(),
            controllable: net.controllable().to_vec(),
            uncontrollable: net.uncontrollable(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, bus: usize) -> usize {
        bus - 1
    }

    pub fn controllable(&self) -> &[usize] {
        &self.controllable
    }

    pub fn uncontrollable(&self) -> &[usize] {
        &self.uncontrollable
    }

    pub fn controllable_rows(&self) -> Vec<usize> {
        self.controllable.iter().map(|&b| b - 1).collect()
    }

    pub fn uncontrollable_rows(&self) -> Vec<usize> {
        self.uncontrollable.iter().map(|&b| b - 1).collect()
    }

    /// Position of `bus` inside the controllable vector.
    pub fn controllable_position(&self, bus: usize) -> Option<usize> {
        self.controllable.binary_search(&bus).ok()
    }

    /// Assembles the full N-vector of reactive injections.
    pub fn assemble_q(&self, q_uncontrolled: &DVector<f64>, q_c: &DVector<f64>) -> Result<DVector<f64>> {
        if q_uncontrolled.len() != self.uncontrollable.len() {
            return Err(Error::Dimension(format!(
                "q_uncontrolled has {} entries, expected {}",
                q_uncontrolled.len(),
                self.uncontrollable.len()
            )));
        }
        if q_c.len() != self.controllable.len() {
            return Err(Error::Dimension(format!(
                "q_c has {} entries, expected {}",
                q_c.len(),
                self.controllable.len()
            )));
        }
        let mut q = DVector::zeros(self.n);
        for (k, &b) in self.uncontrollable.iter().enumerate() {
            q[b - 1] = q_uncontrolled[k];
        }
        for (k, &b) in self.controllable.iter().enumerate() {
            q[b - 1] = q_c[k];
        }
        Ok(q)
    }

    /// Restricts a full N-vector to the controllable buses.
    pub fn gather_controllable(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.controllable.len(), self.controllable.iter().map(|&b| full[b - 1]))
    }
}

/// Per-unit sensitivity matrices of a radial network.
#[derive(Debug, Clone)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub x_cc: DMatrix<f64>,
    /// Spectral norm of `x_cc`.
    pub x_norm: f64,
    pub index: BusIndex,
}

/// Reduced incidence matrix `M` (substation row removed); column k is line k
/// oriented parent -> child.
pub fn reduced_incidence(net: &GridNetwork) -> DMatrix<f64> {
    let n = net.n();
    let mut m = DMatrix::zeros(n, n);
    for bus in 1..net.bus_count() {
        let (parent, k) = net.parent(bus).expect("non-root bus has a parent");
        if parent != 0 {
            m[(parent - 1, k)] = 1.0;
        }
        m[(bus - 1, k)] = -1.0;
    }
    m
}

pub fn build_matrices(net: &GridNetwork) -> Result<SensitivityMatrices> {
    let n = net.n();
    let m = reduced_incidence(net);
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::Numerical("reduced incidence matrix is singular".into()))?;

    let z = net.z_base();
    let mut d_r = DVector::zeros(n);
    let mut d_x = DVector::zeros(n);
    for (k, l) in net.lines().iter().enumerate() {
        d_r[k] = l.r_ohm / z;
        d_x[k] = l.x_ohm / z;
    }
    let m_inv_t = m_inv.transpose();
    let r = &m_inv_t * DMatrix::from_diagonal(&d_r) * &m_inv;
    let x = &m_inv_t * DMatrix::from_diagonal(&d_x) * &m_inv;

    let index = BusIndex::new(net);
    let rows = index.controllable_rows();
    let x_cc = x.select_rows(&rows).select_columns(&rows);
    let x_norm = if rows.is_empty() { 0.0 } else { spectral_norm_sym(&x_cc, 1e-10, 100_000)? };

    Ok(SensitivityMatrices { r, x, x_cc, x_norm, index })
}

/// Largest |eigenvalue| of a symmetric matrix by power iteration, stopped when
/// the relative change of the Rayleigh estimate falls below `rel_tol`.
pub fn spectral_norm_sym(a: &DMatrix<f64>, rel_tol: f64, max_iter: usize) -> Result<f64> {
    let n = a.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    // ones plus a small ramp avoids starting orthogonal to the top eigenvector
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 1e-3 * i as f64);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= rel_tol * next {
            return Ok(next);
        }
        lambda = next;
    }
    Err(Error::NotConverged { what: "power iteration", iterations: max_iter, residual: lambda })
}

impl SensitivityMatrices {
    pub fn n(&self) -> usize {
        self.index.n()
    }

    /// `v = R p + X q + 1` for a scenario and controllable setpoints.
    pub fn solve_lindistflow(&self, scen: &PowerScenario, q_c: &DVector<f64>) -> Result<DVector<f64>> {
        scen.check(&self.index)?;
        let q = self.index.assemble_q(&scen.q_uncontrolled, q_c)?;
        Ok(&self.r * &scen.p + &self.x * q + DVector::from_element(self.n(), 1.0))
    }

    /// `R p + 1`, the no-reactive-power voltage.
    pub fn v_hat(&self, scen: &PowerScenario) -> Result<DVector<f64>> {
        scen.check(&self.index)?;
        Ok(&self.r * &scen.p + DVector::from_element(self.n(), 1.0))
    }

    /// Splits the model into `v_C = X_CC q_C + ṽ` and returns `(X_CC, ṽ)`.
    pub fn partition_controllable(&self, scen: &PowerScenario) -> Result<(DMatrix<f64>, DVector<f64>)> {
        scen.check(&self.index)?;
        let c = self.index.controllable_rows();
        if c.is_empty() {
            return Err(Error::Precondition("controllable set is empty".into()));
        }
        let u = self.index.uncontrollable_rows();
        let p_c = scen.p.select_rows(&c);
        let r_cc = self.r.select_rows(&c).select_columns(&c);
        let mut v_tilde = r_cc * p_c + DVector::from_element(c.len(), 1.0);
        if !u.is_empty() {
            let p_u = scen.p.select_rows(&u);
            let r_uc = self.r.select_rows(&u).select_columns(&c);
            let x_uc = self.x.select_rows(&u).select_columns(&c);
            v_tilde += r_uc.transpose() * p_u + x_uc.transpose() * &scen.q_uncontrolled;
        }
        Ok((self.x_cc.clone(), v_tilde))
    }

    /// Columns of X belonging to controllable buses (N x |C|).
    pub fn x_all_c(&self) -> DMatrix<f64> {
        self.x.select_columns(&self.index.controllable_rows())
    }
}
