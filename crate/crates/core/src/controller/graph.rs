//! Communication graphs and clique partitions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected communication graph over controllable buses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    adj: BTreeMap<usize, BTreeSet<usize>>,
}

impl CommGraph {
    pub fn new(nodes: &[usize], edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: BTreeMap<usize, BTreeSet<usize>> = nodes.iter().map(|&n| (n, BTreeSet::new())).collect();
        if adj.len() != nodes.len() {
            return Err(Error::Topology("communication graph lists a node twice".into()));
        }
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Topology(format!("communication edge ({a}, {b}) is a self-loop")));
            }
            for n in [a, b] {
                if !adj.contains_key(&n) {
                    return Err(Error::Topology(format!(
                        "communication edge ({a}, {b}) touches bus {n}, which is not a graph node"
                    )));
                }
            }
            adj.get_mut(&a).expect("checked").insert(b);
            adj.get_mut(&b).expect("checked").insert(a);
        }
        Ok(Self { adj })
    }

    pub fn complete(nodes: &[usize]) -> Self {
        let mut edges = Vec::new();
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &nodes[i + 1..] {
                edges.push((a, b));
            }
        }
        Self::new(nodes, &edges).expect("complete graph is valid")
    }

    pub fn edgeless(nodes: &[usize]) -> Self {
        Self::new(nodes, &[]).expect("edgeless graph is valid")
    }

    /// Union of complete graphs on each of `cliques`.
    pub fn from_cliques(nodes: &[usize], cliques: &[Vec<usize>]) -> Result<Self> {
        let mut edges = Vec::new();
        for c in cliques {
            for (i, &a) in c.iter().enumerate() {
                for &b in &c[i + 1..] {
                    edges.push((a, b));
                }
            }
        }
        Self::new(nodes, &edges)
    }

    pub fn nodes(&self) -> Vec<usize> {
        self.adj.keys().copied().collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (&a, nb) in &self.adj {
            out.extend(nb.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    pub fn degree(&self, n: usize) -> usize {
        self.adj.get(&n).map_or(0, BTreeSet::len)
    }

    pub fn neighbors(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj.get(&n).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn is_clique(&self, set: &[usize]) -> bool {
        set.iter().all(|n| self.adj.contains_key(n))
            && set.iter().enumerate().all(|(i, &a)| set[i + 1..].iter().all(|&b| self.adjacent(a, b)))
    }
}

/// Cover of the controllable buses by cliques `M_ℓ`. Subgraphs may overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    subgraphs: Vec<Vec<usize>>,
}

impl Partition {
    /// Checks that subgraphs are nonempty, duplicate-free, and together cover
    /// exactly `controllable`. Member lists are sorted.
    pub fn new(subgraphs: Vec<Vec<usize>>, controllable: &[usize]) -> Result<Self> {
        if subgraphs.is_empty() && !controllable.is_empty() {
            return Err(Error::Topology("partition has no subgraphs".into()));
        }
        let allowed: BTreeSet<usize> = controllable.iter().copied().collect();
        let mut covered = BTreeSet::new();
        let mut out = Vec::with_capacity(subgraphs.len());
        for (k, mut s) in subgraphs.into_iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Topology(format!("subgraph {k} is empty")));
            }
            s.sort_unstable();
            if s.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Topology(format!("subgraph {k} repeats a bus")));
            }
            if let Some(b) = s.iter().find(|b| !allowed.contains(b)) {
                return Err(Error::Topology(format!("subgraph {k} contains bus {b}, which is not controllable")));
            }
            covered.extend(s.iter().copied());
            out.push(s);
        }
        if let Some(b) = allowed.difference(&covered).next() {
            return Err(Error::Topology(format!("controllable bus {b} is not in any subgraph")));
        }
        Ok(Self { subgraphs: out })
    }

    pub fn singletons(controllable: &[usize]) -> Self {
        Self { subgraphs: controllable.iter().map(|&b| vec![b]).collect() }
    }

    pub fn full(controllable: &[usize]) -> Self {
        let mut all = controllable.to_vec();
        all.sort_unstable();
        Self { subgraphs: vec![all] }
    }

    pub fn subgraphs(&self) -> &[Vec<usize>] {
        &self.subgraphs
    }

    pub fn len(&self) -> usize {
        self.subgraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subgraphs.is_empty()
    }

    /// Every subgraph must be a clique of `graph`.
    pub fn check_cliques(&self, graph: &CommGraph) -> Result<()> {
        for (k, s) in self.subgraphs.iter().enumerate() {
            if !graph.is_clique(s) {
                return Err(Error::Topology(format!("subgraph {k} {s:?} is not a clique of the communication graph")));
            }
        }
        Ok(())
    }

    /// How many subgraphs each bus of `controllable` belongs to.
    pub fn multiplicity(&self, controllable: &[usize]) -> Vec<usize> {
        controllable
            .iter()
            .map(|b| self.subgraphs.iter().filter(|s| s.contains(b)).count())
            .collect()
    }
}

/// Greedy clique cover. The uncovered node of highest degree (smallest id on
/// ties) seeds a clique, which is grown to maximality by scanning neighbours in
/// the same order, uncovered ones first.
pub fn cover_cliques(graph: &CommGraph) -> Partition {
    let nodes = graph.nodes();
    let rank = |n: &usize| (std::cmp::Reverse(graph.degree(*n)), *n);
    let mut uncovered: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut subgraphs = Vec::new();
    while let Some(&seed) = uncovered.iter().min_by_key(|n| rank(n)) {
        let mut cand: Vec<usize> = graph.neighbors(seed).collect();
        cand.sort_by_key(|n| (!uncovered.contains(n), rank(n)));
        let mut clique = vec![seed];
        for c in cand {
            if clique.iter().all(|&m| graph.adjacent(m, c)) {
                clique.push(c);
            }
        }
        for m in &clique {
            uncovered.remove(m);
        }
        clique.sort_unstable();
        subgraphs.push(clique);
    }
    Partition { subgraphs }
}
