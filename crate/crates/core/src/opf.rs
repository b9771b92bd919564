//! OPF oracle and the experiment cost.
//!
//! The cost of a setpoint is `w‖v − 1‖² + qᵀRq` over all buses, with `q` the full
//! reactive vector. Under LinDistFlow `v` is affine in `q_𝒞`, so minimizing the
//! cost over the reactive box is a strongly convex box-constrained QP.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::ReactiveBox;
use crate::error::{Error, Result};
use crate::grid::{spectral_norm_sym, Grid, PowerFlowModel, PowerScenario, SensitivityMatrices};

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub voltage_weight: f64,
    pub loss_matrix: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(voltage_weight: f64, loss_matrix: DMatrix<f64>) -> Result<Self> {
        if !(voltage_weight > 0.0) {
            return Err(Error::Config(format!("voltage weight must be positive, got {voltage_weight}")));
        }
        if !loss_matrix.is_square() || (&loss_matrix - loss_matrix.transpose()).amax() > 1e-12 {
            return Err(Error::Config("loss matrix must be square and symmetric".into()));
        }
        Ok(Self { voltage_weight, loss_matrix })
    }

    /// Weight 100 on voltage deviation and the network's `R` as loss matrix.
    pub fn standard(mat: &SensitivityMatrices) -> Self {
        Self { voltage_weight: 100.0, loss_matrix: mat.r.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub volt: f64,
    pub loss: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.volt + self.loss
    }
}

impl std::ops::AddAssign for CostBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.volt += o.volt;
        self.loss += o.loss;
    }
}

/// Cost of a known voltage profile and full reactive vector.
pub fn cost_of(v: &DVector<f64>, q_full: &DVector<f64>, w: &CostWeights) -> CostBreakdown {
    let dev = v.map(|x| x - 1.0);
    CostBreakdown {
        volt: w.voltage_weight * dev.norm_squared(),
        loss: q_full.dot(&(&w.loss_matrix * q_full)),
    }
}

/// Cost of setpoints `q_c` with voltages from the chosen power-flow model.
pub fn cost(grid: &Grid, model: PowerFlowModel, scen: &PowerScenario, q_c: &DVector<f64>, w: &CostWeights) -> Result<CostBreakdown> {
    let v = grid.voltages(model, scen, q_c)?;
    let q = grid.index().assemble_q(&scen.q_uncontrolled, q_c)?;
    Ok(cost_of(&v, &q, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpfOptions {
    /// Stop once the KKT residual falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Projected-gradient iterations between active-set Newton attempts; 0
    /// disables the polish and leaves plain fixed-step projected gradient.
    pub polish_every: usize,
}

impl Default for OpfOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 50_000, polish_every: 25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpfSolution {
    pub q_star: DVector<f64>,
    /// Voltages at every bus for `q_star`.
    pub v_star: DVector<f64>,
    /// `‖q − Proj(q − ∇f(q))‖_∞`, zero exactly at a KKT point.
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
}

/// The QP `½ qᵀHq + gᵀq + const` in the controllable setpoints.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
    curvature: f64,
    a: DMatrix<f64>,
    offset: DVector<f64>,
    bx: ReactiveBox,
}

impl OpfProblem {
    /// Builds the QP. `v_shift` is added to the LinDistFlow voltages (used by
    /// sequential linearization); pass zero for the plain linear model.
    pub fn new(mat: &SensitivityMatrices, scen: &PowerScenario, bx: &ReactiveBox, w: &CostWeights, v_shift: Option<&DVector<f64>>) -> Result<Self> {
        scen.check(&mat.index)?;
        let c = mat.index.controllable_rows();
        let u = mat.index.uncontrollable_rows();
        if bx.len() != c.len() {
            return Err(Error::Dimension(format!("box has {} entries, {} controllable buses", bx.len(), c.len())));
        }
        if w.loss_matrix.shape() != (mat.n(), mat.n()) {
            return Err(Error::Dimension("loss matrix does not match the network".into()));
        }
        let a = mat.x_all_c();
        let q_u_full = mat.index.assemble_q(&scen.q_uncontrolled, &DVector::zeros(c.len()))?;
        // v − 1 = A q_c + offset
        let mut offset = &mat.r * &scen.p + &mat.x * &q_u_full;
        if let Some(s) = v_shift {
            offset += s;
        }
        let r_cc = w.loss_matrix.select_rows(&c).select_columns(&c);
        let wv = w.voltage_weight;
        let hessian = a.tr_mul(&a) * (2.0 * wv) + r_cc * 2.0;
        let mut linear = a.tr_mul(&offset) * (2.0 * wv);
        let mut constant = wv * offset.norm_squared();
        if !u.is_empty() {
            let r_cu = w.loss_matrix.select_rows(&c).select_columns(&u);
            let r_uu = w.loss_matrix.select_rows(&u).select_columns(&u);
            linear += r_cu * &scen.q_uncontrolled * 2.0;
            constant += scen.q_uncontrolled.dot(&(r_uu * &scen.q_uncontrolled));
        }
        // tiny margin so 1/Λ stays a descent step under rounding
        let curvature = spectral_norm_sym(&hessian, 1e-12, 1_000_000)? * (1.0 + 1e-9);
        Ok(Self { hessian, linear, constant, curvature, a, offset, bx: bx.clone() })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    pub fn objective(&self, q: &DVector<f64>) -> f64 {
        0.5 * q.dot(&(&self.hessian * q)) + self.linear.dot(q) + self.constant
    }

    pub fn gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.hessian * q + &self.linear
    }

    pub fn kkt_residual(&self, q: &DVector<f64>) -> f64 {
        let g = self.gradient(q);
        (q - self.bx.clamp(&(q - g))).amax()
    }

    /// LinDistFlow voltages (plus any shift) at every bus.
    pub fn voltages(&self, q: &DVector<f64>) -> DVector<f64> {
        (&self.a * q + &self.offset).add_scalar(1.0)
    }

    /// Projected gradient with step `1/Λ` from `q0`, interleaved with Newton
    /// steps on the current free set. A Newton step is kept only if it does not
    /// raise the objective, so the objective never increases.
    pub fn solve_from(&self, q0: &DVector<f64>, opts: &OpfOptions) -> Result<OpfSolution> {
        if q0.len() != self.bx.len() {
            return Err(Error::Dimension(format!("q0 has {} entries, expected {}", q0.len(), self.bx.len())));
        }
        let step = 1.0 / self.curvature;
        let mut q = self.bx.clamp(q0);
        let mut f = self.objective(&q);
        let mut residual = self.kkt_residual(&q);
        let mut it = 0;
        while residual >= opts.tolerance && it < opts.max_iterations {
            it += 1;
            let g = self.gradient(&q);
            let next = self.bx.clamp(&(&q - g * step));
            q = next;
            f = self.objective(&q);
            if opts.polish_every > 0 && it % opts.polish_every == 0 {
                if let Some((qn, fnew)) = self.newton_polish(&q) {
                    if fnew <= f {
                        q = qn;
                        f = fnew;
                    }
                }
            }
            residual = self.kkt_residual(&q);
        }
        if residual >= opts.tolerance {
            return Err(Error::NotConverged { what: "OPF projected gradient", iterations: it, residual });
        }
        Ok(OpfSolution { v_star: self.voltages(&q), q_star: q, kkt_residual: residual, objective: f, iterations: it })
    }

    pub fn solve(&self, opts: &OpfOptions) -> Result<OpfSolution> {
        self.solve_from(&DVector::zeros(self.bx.len()), opts)
    }

    fn newton_polish(&self, q: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let g = self.gradient(q);
        let (lo, hi) = (self.bx.q_min(), self.bx.q_max());
        let free: Vec<usize> = (0..q.len())
            .filter(|&i| !((q[i] <= lo[i] && g[i] > 0.0) || (q[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        if free.is_empty() {
            return None;
        }
        let h_ff = self.hessian.select_rows(&free).select_columns(&free);
        let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let delta = h_ff.cholesky()?.solve(&g_f);
        let mut next = q.clone();
        for (k, &i) in free.iter().enumerate() {
            next[i] -= delta[k];
        }
        let next = self.bx.clamp(&next);
        let f = self.objective(&next);
        Some((next, f))
    }
}

/// Minimizes the cost under LinDistFlow over the box.
pub fn solve_opf(mat: &SensitivityMatrices, scen: &PowerScenario, bx: &ReactiveBox, w: &CostWeights) -> Result<OpfSolution> {
    solve_opf_with(mat, scen, bx, w, &OpfOptions::default())
}

pub fn solve_opf_with(mat: &SensitivityMatrices, scen: &PowerScenario, bx: &ReactiveBox, w: &CostWeights, opts: &OpfOptions) -> Result<OpfSolution> {
    OpfProblem::new(mat, scen, bx, w, None)?.solve(opts)
}

/// Refines the LinDistFlow optimum against DistFlow: each pass shifts the
/// linear model by the DistFlow/LinDistFlow voltage gap at the current
/// setpoint and re-solves. Returned voltages come from DistFlow.
pub fn solve_opf_sequential(grid: &Grid, scen: &PowerScenario, bx: &ReactiveBox, w: &CostWeights, passes: usize, opts: &OpfOptions) -> Result<OpfSolution> {
    let mut sol = solve_opf_with(&grid.mat, scen, bx, w, opts)?;
    for _ in 0..passes {
        let v_nl = grid.voltages(PowerFlowModel::Nonlinear, scen, &sol.q_star)?;
        let v_lin = grid.mat.solve_lindistflow(scen, &sol.q_star)?;
        let shift = v_nl - v_lin;
        let prob = OpfProblem::new(&grid.mat, scen, bx, w, Some(&shift))?;
        sol = prob.solve_from(&sol.q_star, opts)?;
    }
    if passes > 0 {
        sol.v_star = grid.voltages(PowerFlowModel::Nonlinear, scen, &sol.q_star)?;
    }
    Ok(sol)
}

/// Which model produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelModel {
    #[default]
    Linear,
    SequentialLinearization,
}

impl LabelModel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::SequentialLinearization => "sequential_linearization",
        }
    }
}

/// One supervised pair: controllable voltages at the optimum and the optimal setpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub label: String,
    pub v_c: DVector<f64>,
    pub q_star: DVector<f64>,
}

/// Writes labels as CSV: `# key=value` header lines, then `label`, `v_bus<k>`
/// (p.u.) and `q_bus<k>` (MVar) columns for each controllable bus.
pub fn write_labels_csv(path: impl AsRef<Path>, controllable: &[usize], base_mva: f64, rows: &[LabelRow], meta: &[(String, String)]) -> Result<()> {
    let mut out = Vec::new();
    write_labels(&mut out, controllable, base_mva, rows, meta)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_labels<W: std::io::Write>(mut out: W, controllable: &[usize], base_mva: f64, rows: &[LabelRow], meta: &[(String, String)]) -> Result<()> {
    writeln!(out, "# base_mva={base_mva}")?;
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend(controllable.iter().map(|b| format!("v_bus{b}")));
    header.extend(controllable.iter().map(|b| format!("q_bus{b}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.v_c.iter().map(|v| v.to_string()));
        rec.extend(r.q_star.iter().map(|q| (q * base_mva).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a label file. Returns the rows and the header metadata.
pub fn read_labels_csv(path: impl AsRef<Path>, controllable: &[usize]) -> Result<(Vec<LabelRow>, Vec<(String, String)>)> {
    read_labels(&std::fs::read_to_string(path)?, controllable)
}

pub fn read_labels(text: &str, controllable: &[usize]) -> Result<(Vec<LabelRow>, Vec<(String, String)>)> {
    let mut meta = Vec::new();
    let mut skipped = 0usize;
    for line in text.lines() {
        let Some(rest) = line.strip_prefix('#') else { break };
        skipped += 1;
        if let Some((k, v)) = rest.trim().split_once('=') {
            meta.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let base_mva: f64 = meta
        .iter()
        .find(|(k, _)| k == "base_mva")
        .ok_or_else(|| Error::Parse { line: 1, msg: "label file has no base_mva header".into() })?
        .1
        .parse()
        .map_err(|e| Error::Parse { line: 1, msg: format!("bad base_mva: {e}") })?;

    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let find = |name: String| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            line: skipped + 1,
            msg: format!("label file is missing column {name:?}"),
        })
    };
    let v_cols = controllable.iter().map(|b| find(format!("v_bus{b}"))).collect::<Result<Vec<_>>>()?;
    let q_cols = controllable.iter().map(|b| find(format!("q_bus{b}"))).collect::<Result<Vec<_>>>()?;
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = skipped + i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: format!("label row {}: {e}", i + 1) })?;
        let num = |c: usize| -> Result<f64> {
            let s = rec.get(c).unwrap_or("").trim();
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                msg: format!("label row {}: column {:?} value {s:?} is not a finite number", i + 1, &headers[c]),
            })
        };
        let v_c = v_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let q = q_cols.iter().map(|&c| num(c).map(|x| x / base_mva)).collect::<Result<Vec<_>>>()?;
        rows.push(LabelRow {
            label: label_col.and_then(|c| rec.get(c)).unwrap_or_default().to_string(),
            v_c: DVector::from_vec(v_c),
            q_star: DVector::from_vec(q),
        });
    }
    Ok((rows, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridNetwork, Line};
    use approx::assert_abs_diff_eq;

    fn one_bus() -> Grid {
        Grid::new(GridNetwork::new("one", 1.0, 1.0, vec![Line { from: 0, to: 1, r_ohm: 0.02, x_ohm: 0.1 }], vec![1]).unwrap()).unwrap()
    }

    #[test]
    fn flat_profile_costs_nothing() {
        let v = DVector::from_element(3, 1.0);
        let c = cost_of(&v, &DVector::zeros(3), &CostWeights { voltage_weight: 100.0, loss_matrix: DMatrix::identity(3, 3) });
        assert_eq!(c, CostBreakdown { volt: 0.0, loss: 0.0 });
    }

    #[test]
    fn two_bus_hand_case() {
        let v = DVector::from_vec(vec![1.01, 0.99]);
        let c = cost_of(&v, &DVector::zeros(2), &CostWeights { voltage_weight: 100.0, loss_matrix: DMatrix::identity(2, 2) });
        assert_abs_diff_eq!(c.volt, 0.02, epsilon = 1e-15);
    }

    #[test]
    fn singleton_box_gives_zero() {
        let g = one_bus();
        let scen = PowerScenario::new(DVector::from_element(1, -0.3), DVector::zeros(0), "t");
        let bx = ReactiveBox::new(DVector::zeros(1), DVector::zeros(1)).unwrap();
        let s = solve_opf(&g.mat, &scen, &bx, &CostWeights::standard(&g.mat)).unwrap();
        assert_eq!(s.q_star[0], 0.0);
    }

    #[test]
    fn scalar_unconstrained_minimizer() {
        let g = one_bus();
        let scen = PowerScenario::new(DVector::from_element(1, -0.3), DVector::zeros(0), "t");
        let bx = ReactiveBox::symmetric(DVector::from_element(1, 10.0)).unwrap();
        let w = CostWeights::standard(&g.mat);
        let s = solve_opf(&g.mat, &scen, &bx, &w).unwrap();
        let x = g.mat.x[(0, 0)];
        let r = g.mat.r[(0, 0)];
        let vt = 1.0 + r * scen.p[0];
        let expected = -100.0 * x * (vt - 1.0) / (100.0 * x * x + r);
        assert_abs_diff_eq!(s.q_star[0], expected, epsilon = 1e-8);
        assert!(s.kkt_residual < 1e-8);
    }

    #[test]
    fn labels_round_trip() {
        let rows = vec![LabelRow {
            label: "d0t0".into(),
            v_c: DVector::from_vec(vec![1.01, 0.98]),
            q_star: DVector::from_vec(vec![0.125, -0.2]),
        }];
        let mut buf = Vec::new();
        write_labels(&mut buf, &[3, 7], 10.0, &rows, &[("model".into(), "linear".into())]).unwrap();
        let (back, meta) = read_labels(std::str::from_utf8(&buf).unwrap(), &[3, 7]).unwrap();
        assert_eq!(back, rows);
        assert!(meta.contains(&("model".into(), "linear".into())));
    }

    #[test]
    fn corrupt_label_row_is_named() {
        let text = "# base_mva=10\nlabel,v_bus3,q_bus3\na,1.0,0.5\nb,oops,0.1\n";
        let err = read_labels(text, &[3]).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }
}
