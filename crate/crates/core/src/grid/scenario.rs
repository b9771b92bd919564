//! Operating points and the scenario CSV format.
//!
//! A scenario file has one row per timestamp with a `label` column followed by
//! `p_bus<k>` for every bus and `q_bus<k>` for every uncontrollable bus, in MW
//! and MVar. Values are converted to per-unit on load.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;

use super::matrices::BusIndex;
use super::network::GridNetwork;
use crate::error::{Error, Result};

/// Active injections at every bus and reactive injections at uncontrollable
/// buses, in per-unit with injection positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerScenario {
    pub p: DVector<f64>,
    pub q_uncontrolled: DVector<f64>,
    pub label: String,
}

impl PowerScenario {
    pub fn new(p: DVector<f64>, q_uncontrolled: DVector<f64>, label: impl Into<String>) -> Self {
        Self { p, q_uncontrolled, label: label.into() }
    }

    pub fn zero(index: &BusIndex, label: impl Into<String>) -> Self {
        Self::new(
            DVector::zeros(index.n()),
            DVector::zeros(index.uncontrollable().len()),
            label,
        )
    }

    pub fn check(&self, index: &BusIndex) -> Result<()> {
        if self.p.len() != index.n() {
            return Err(Error::Dimension(format!(
                "scenario {:?}: p has {} entries, network has {} buses",
                self.label,
                self.p.len(),
                index.n()
            )));
        }
        if self.q_uncontrolled.len() != index.uncontrollable().len() {
            return Err(Error::Dimension(format!(
                "scenario {:?}: q_uncontrolled has {} entries, network has {} uncontrollable buses",
                self.label,
                self.q_uncontrolled.len(),
                index.uncontrollable().len()
            )));
        }
        Ok(())
    }

    /// Scales every injection by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self::new(&self.p * alpha, &self.q_uncontrolled * alpha, self.label.clone())
    }
}

pub fn write_scenarios_csv(
    path: impl AsRef<Path>,
    net: &GridNetwork,
    scenarios: &[PowerScenario],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    write_scenarios(&mut w, net, scenarios)?;
    w.flush()?;
    Ok(())
}

pub fn write_scenarios<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    net: &GridNetwork,
    scenarios: &[PowerScenario],
) -> Result<()> {
    let unc = net.uncontrollable();
    let mut header = vec!["label".to_string()];
    header.extend((1..net.bus_count()).map(|b| format!("p_bus{b}")));
    header.extend(unc.iter().map(|b| format!("q_bus{b}")));
    w.write_record(&header)?;
    let base = net.base_mva();
    for s in scenarios {
        let mut rec = vec![s.label.clone()];
        rec.extend(s.p.iter().map(|v| format!("{}", v * base)));
        rec.extend(s.q_uncontrolled.iter().map(|v| format!("{}", v * base)));
        w.write_record(&rec)?;
    }
    Ok(())
}

pub fn read_scenarios_csv(path: impl AsRef<Path>, net: &GridNetwork) -> Result<Vec<PowerScenario>> {
    let rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    read_scenarios(rdr, net)
}

pub fn read_scenarios<R: std::io::Read>(
    mut rdr: csv::Reader<R>,
    net: &GridNetwork,
) -> Result<Vec<PowerScenario>> {
    let headers = rdr.headers()?.clone();
    let cols: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let col = |name: &str| {
        cols.get(name).copied().ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("scenario file is missing column {name:?}"),
        })
    };
    let p_cols = (1..net.bus_count())
        .map(|b| col(&format!("p_bus{b}")))
        .collect::<Result<Vec<_>>>()?;
    let unc = net.uncontrollable();
    let q_cols = unc.iter().map(|b| col(&format!("q_bus{b}"))).collect::<Result<Vec<_>>>()?;
    let label_col = cols.get("label").copied();

    let base = net.base_mva();
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = rec
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map(|p| p.line() as usize)
            .unwrap_or(row + 2);
        let rec = rec.map_err(|e| Error::Parse { line, msg: format!("scenario row {}: {e}", row + 1) })?;
        let field = |c: usize| -> Result<f64> {
            let s = rec.get(c).unwrap_or("").trim();
            let v = s.parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("scenario row {}: column {:?} value {s:?}: {e}", row + 1, &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("scenario row {}: column {:?} is not finite", row + 1, &headers[c]),
                });
            }
            Ok(v / base)
        };
        let p = p_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?;
        let q = q_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?;
        let label = label_col
            .and_then(|c| rec.get(c))
            .map(str::to_string)
            .unwrap_or_else(|| format!("row{}", row + 1));
        out.push(PowerScenario::new(DVector::from_vec(p), DVector::from_vec(q), label));
    }
    Ok(out)
}
