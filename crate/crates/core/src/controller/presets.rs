//! Communication setups used for the ucsd49 experiments.

use serde::{Deserialize, Serialize};

use super::graph::{CommGraph, Partition};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommSetup {
    /// Every controller sees only its own bus.
    NoComm,
    /// Small communication radius, five cliques.
    Distributed1,
    /// Two large overlapping cliques.
    Distributed2,
    /// All-to-all.
    Full,
}

impl CommSetup {
    pub const ALL: [CommSetup; 4] = [Self::NoComm, Self::Distributed1, Self::Distributed2, Self::Full];

    pub fn label(self) -> &'static str {
        match self {
            Self::NoComm => "NC",
            Self::Distributed1 => "DC-1",
            Self::Distributed2 => "DC-2",
            Self::Full => "FC",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label().eq_ignore_ascii_case(s))
    }

    /// Subgraphs as bus ids. The two distributed setups use the ucsd49 bus
    /// numbering.
    pub fn cliques(self, controllable: &[usize]) -> Vec<Vec<usize>> {
        match self {
            Self::NoComm => controllable.iter().map(|&b| vec![b]).collect(),
            Self::Distributed1 => vec![vec![14, 15, 17, 20], vec![19, 32, 34], vec![27, 30, 38, 39], vec![29], vec![41]],
            Self::Distributed2 => vec![vec![14, 15, 17, 19, 20, 27, 29, 30, 32, 34, 38, 39], vec![27, 30, 38, 39, 41]],
            Self::Full => vec![controllable.to_vec()],
        }
    }

    pub fn partition(self, controllable: &[usize]) -> Result<Partition> {
        Partition::new(self.cliques(controllable), controllable)
    }

    /// Communication graph whose edges are exactly the clique pairs.
    pub fn graph(self, controllable: &[usize]) -> Result<CommGraph> {
        CommGraph::from_cliques(controllable, &self.cliques(controllable))
    }
}
