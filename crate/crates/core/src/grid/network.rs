//! Radial network description and the plain-text network file format.
//!
//! A network file is a short key-value header followed by a `[lines]` table:
//!
//! ```text
//! name = toy
//! base_kv = 12.47
//! base_mva = 10
//! controllable = [2]
//! [lines]
//! # from to r_ohm x_ohm
//! 0 1 0.0174 0.0002
//! 1 2 0.0232 0.4855
//! ```

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One branch of the tree. Impedances are in ohms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// A radial distribution grid rooted at the substation (bus 0).
#[derive(Debug, Clone)]
pub struct GridNetwork {
    name: String,
    base_kv: f64,
    base_mva: f64,
    lines: Vec<Line>,
    controllable: Vec<usize>,
    // parent[b] = (parent bus, line index) for b >= 1
    parent: Vec<Option<(usize, usize)>>,
    children: Vec<Vec<usize>>,
    // breadth-first order starting at the root
    order: Vec<usize>,
}

impl GridNetwork {
    pub fn new(
        name: impl Into<String>,
        base_kv: f64,
        base_mva: f64,
        lines: Vec<Line>,
        controllable: Vec<usize>,
    ) -> Result<Self> {
        if !(base_kv.is_finite() && base_kv > 0.0) {
            return Err(Error::Topology(format!("base_kv must be positive, got {base_kv}")));
        }
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(Error::Topology(format!("base_mva must be positive, got {base_mva}")));
        }
        if lines.is_empty() {
            return Err(Error::Topology("network has no lines".into()));
        }
        let bus_count = lines.len() + 1;

        for (k, l) in lines.iter().enumerate() {
            if l.from >= bus_count || l.to >= bus_count {
                return Err(Error::Topology(format!(
                    "line #{k} ({}, {}) references a bus outside 0..{} (a tree with {} lines has {bus_count} buses)",
                    l.from,
                    l.to,
                    bus_count - 1,
                    lines.len()
                )));
            }
            if l.from == l.to {
                return Err(Error::Topology(format!("line #{k} ({}, {}) is a self-loop", l.from, l.to)));
            }
            if !(l.r_ohm.is_finite() && l.r_ohm >= 0.0) {
                return Err(Error::Topology(format!(
                    "line #{k} ({}, {}) has negative or non-finite resistance {}",
                    l.from, l.to, l.r_ohm
                )));
            }
            if !(l.x_ohm.is_finite() && l.x_ohm > 0.0) {
                return Err(Error::Topology(format!(
                    "line #{k} ({}, {}) has non-positive reactance {} (zero-impedance branches are not allowed)",
                    l.from, l.to, l.x_ohm
                )));
            }
        }

        // union-find: the first edge joining two already-connected buses closes a cycle
        let mut uf: Vec<usize> = (0..bus_count).collect();
        fn find(uf: &mut [usize], mut a: usize) -> usize {
            while uf[a] != a {
                uf[a] = uf[uf[a]];
                a = uf[a];
            }
            a
        }
        for (k, l) in lines.iter().enumerate() {
            let (ra, rb) = (find(&mut uf, l.from), find(&mut uf, l.to));
            if ra == rb {
                return Err(Error::Topology(format!(
                    "line #{k} ({}, {}) closes a cycle",
                    l.from, l.to
                )));
            }
            uf[ra] = rb;
        }

        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); bus_count];
        for (k, l) in lines.iter().enumerate() {
            adj[l.from].push((l.to, k));
            adj[l.to].push((l.from, k));
        }
        let mut parent = vec![None; bus_count];
        let mut children = vec![Vec::new(); bus_count];
        let mut seen = vec![false; bus_count];
        let mut order = Vec::with_capacity(bus_count);
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(b) = queue.pop_front() {
            order.push(b);
            let mut nbrs = adj[b].clone();
            nbrs.sort_unstable();
            for (n, k) in nbrs {
                if !seen[n] {
                    seen[n] = true;
                    parent[n] = Some((b, k));
                    children[b].push(n);
                    queue.push_back(n);
                }
            }
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return Err(Error::Topology(format!("bus {b} is not reachable from the substation")));
        }

        let mut controllable = controllable;
        controllable.sort_unstable();
        controllable.dedup();
        if let Some(&b) = controllable.iter().find(|&&b| b == 0 || b >= bus_count) {
            return Err(Error::Topology(format!(
                "controllable bus {b} is not in 1..={}",
                bus_count - 1
            )));
        }

        Ok(Self {
            name: name.into(),
            base_kv,
            base_mva,
            lines,
            controllable,
            parent,
            children,
            order,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of buses including the substation.
    pub fn bus_count(&self) -> usize {
        self.lines.len() + 1
    }

    /// Number of non-substation buses (N).
    pub fn n(&self) -> usize {
        self.lines.len()
    }

    pub fn base_kv(&self) -> f64 {
        self.base_kv
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    /// Base impedance in ohms.
    pub fn z_base(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Controllable bus ids in ascending order.
    pub fn controllable(&self) -> &[usize] {
        &self.controllable
    }

    /// Uncontrollable bus ids (1..=N minus the controllable set) in ascending order.
    pub fn uncontrollable(&self) -> Vec<usize> {
        (1..self.bus_count())
            .filter(|b| self.controllable.binary_search(b).is_err())
            .collect()
    }

    /// Returns a copy with a different controllable set.
    pub fn with_controllable(&self, controllable: Vec<usize>) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.base_kv,
            self.base_mva,
            self.lines.clone(),
            controllable,
        )
    }

    /// Parent bus and the index of the line towards it; `None` for the substation.
    pub fn parent(&self, bus: usize) -> Option<(usize, usize)> {
        self.parent[bus]
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Buses in breadth-first order from the substation.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    /// Per-unit (r, x) of the line feeding `bus`.
    pub fn feeder_impedance_pu(&self, bus: usize) -> Option<(f64, f64)> {
        let z = self.z_base();
        self.parent[bus].map(|(_, k)| (self.lines[k].r_ohm / z, self.lines[k].x_ohm / z))
    }

    /// Buses on the path from `bus` up to (excluding) the substation.
    pub fn root_path(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut b = bus;
        while let Some((p, _)) = self.parent[b] {
            path.push(b);
            b = p;
        }
        path
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("unnamed");
        let mut base_kv = None;
        let mut base_mva = None;
        let mut controllable = None;
        let mut lines = Vec::new();
        let mut line_numbers = Vec::new();
        let mut in_lines = false;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if s == "[lines]" {
                in_lines = true;
                continue;
            }
            let perr = |msg: String| Error::Parse { line: lineno, msg };
            if in_lines {
                let fields: Vec<&str> = s.split_whitespace().collect();
                if fields.len() != 4 {
                    return Err(perr(format!(
                        "expected `from to r_ohm x_ohm`, found {} fields",
                        fields.len()
                    )));
                }
                let from = fields[0]
                    .parse::<usize>()
                    .map_err(|e| perr(format!("bad `from` bus {:?}: {e}", fields[0])))?;
                let to = fields[1]
                    .parse::<usize>()
                    .map_err(|e| perr(format!("bad `to` bus {:?}: {e}", fields[1])))?;
                let r_ohm = fields[2]
                    .parse::<f64>()
                    .map_err(|e| perr(format!("bad resistance {:?}: {e}", fields[2])))?;
                let x_ohm = fields[3]
                    .parse::<f64>()
                    .map_err(|e| perr(format!("bad reactance {:?}: {e}", fields[3])))?;
                lines.push(Line { from, to, r_ohm, x_ohm });
                line_numbers.push(lineno);
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| perr(format!("expected `key = value`, found {s:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => name = value.to_string(),
                "base_kv" => {
                    base_kv = Some(value.parse::<f64>().map_err(|e| perr(format!("bad base_kv: {e}")))?)
                }
                "base_mva" => {
                    base_mva = Some(value.parse::<f64>().map_err(|e| perr(format!("bad base_mva: {e}")))?)
                }
                "controllable" => {
                    let inner = value
                        .strip_prefix('[')
                        .and_then(|v| v.strip_suffix(']'))
                        .ok_or_else(|| perr("controllable must be a bracketed list".into()))?;
                    let ids = inner
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(|t| t.parse::<usize>().map_err(|e| perr(format!("bad bus id {t:?}: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    controllable = Some(ids);
                }
                other => return Err(perr(format!("unknown key {other:?}"))),
            }
        }

        let base_kv = base_kv.ok_or(Error::Parse { line: 0, msg: "missing base_kv".into() })?;
        let base_mva = base_mva.ok_or(Error::Parse { line: 0, msg: "missing base_mva".into() })?;
        let controllable = controllable.unwrap_or_default();
        Self::new(name, base_kv, base_mva, lines, controllable).map_err(|e| match e {
            // point topology errors at the offending row of the table
            Error::Topology(msg) => {
                let line = msg
                    .strip_prefix("line #")
                    .and_then(|rest| rest.split_whitespace().next())
                    .and_then(|k| k.parse::<usize>().ok())
                    .and_then(|k| line_numbers.get(k).copied());
                match line {
                    Some(line) => Error::Parse { line, msg },
                    None => Error::Topology(msg),
                }
            }
            other => other,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name = {}", self.name);
        let _ = writeln!(out, "base_kv = {}", self.base_kv);
        let _ = writeln!(out, "base_mva = {}", self.base_mva);
        let ids: Vec<String> = self.controllable.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(out, "controllable = [{}]", ids.join(", "));
        let _ = writeln!(out, "[lines]");
        let _ = writeln!(out, "# from to r_ohm x_ohm");
        for l in &self.lines {
            let _ = writeln!(out, "{} {} {} {}", l.from, l.to, l.r_ohm, l.x_ohm);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> &'static str {
        "name = toy\nbase_kv = 1\nbase_mva = 1\ncontrollable = [2]\n[lines]\n0 1 0.0 0.1\n1 2 0.0 0.2\n"
    }

    #[test]
    fn parses_toy_file() {
        let net = GridNetwork::parse(toy()).unwrap();
        assert_eq!(net.bus_count(), 3);
        assert_eq!(net.controllable(), &[2]);
        assert_eq!(net.uncontrollable(), vec![1]);
        assert_eq!(net.root_path(2), vec![2, 1]);
        assert_eq!(net.z_base(), 1.0);
    }

    #[test]
    fn reversed_line_orientation_is_normalized() {
        let net = GridNetwork::new(
            "rev",
            1.0,
            1.0,
            vec![
                Line { from: 1, to: 0, r_ohm: 0.0, x_ohm: 0.1 },
                Line { from: 2, to: 1, r_ohm: 0.0, x_ohm: 0.2 },
            ],
            vec![],
        )
        .unwrap();
        assert_eq!(net.parent(2), Some((1, 1)));
        assert_eq!(net.parent(1), Some((0, 0)));
    }

    #[test]
    fn cycle_is_rejected_with_line_number() {
        let text = "base_kv = 1\nbase_mva = 1\n[lines]\n0 1 0 0.1\n1 2 0 0.1\n2 1 0 0.1\n";
        match GridNetwork::parse(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("(2, 1)"), "{msg}");
                assert!(msg.contains("cycle"), "{msg}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn zero_reactance_is_rejected() {
        let err = GridNetwork::new(
            "z",
            1.0,
            1.0,
            vec![Line { from: 0, to: 1, r_ohm: 0.1, x_ohm: 0.0 }],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn substation_cannot_be_controllable() {
        assert!(GridNetwork::new(
            "c",
            1.0,
            1.0,
            vec![Line { from: 0, to: 1, r_ohm: 0.1, x_ohm: 0.1 }],
            vec![0],
        )
        .is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "base_kv = 1\nbase_mva = 1\n[lines]\n0 1 0 0.1\n1 2 zero 0.1\n";
        match GridNetwork::parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let net = GridNetwork::parse(toy()).unwrap();
        let again = GridNetwork::parse(&net.to_text()).unwrap();
        assert_eq!(net.to_text(), again.to_text());
    }
}
