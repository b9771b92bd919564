//! Radial grid model and power-flow solvers.

mod distflow;
mod matrices;
mod network;
mod scenario;

pub use distflow::{solve_distflow, solve_distflow_with, DistFlowSolution, SweepOptions};
pub use matrices::{build_matrices, reduced_incidence, spectral_norm_sym, BusIndex, SensitivityMatrices};
pub use network::{GridNetwork, Line};
pub use scenario::{read_scenarios, read_scenarios_csv, write_scenarios, write_scenarios_csv, PowerScenario};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Which power-flow equations produce bus voltages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PowerFlowModel {
    Linear,
    #[default]
    Nonlinear,
}

/// A network together with its sensitivity matrices.
#[derive(Debug, Clone)]
pub struct Grid {
    pub net: GridNetwork,
    pub mat: SensitivityMatrices,
}

impl Grid {
    pub fn new(net: GridNetwork) -> Result<Self> {
        let mat = build_matrices(&net)?;
        Ok(Self { net, mat })
    }

    /// The bundled 49-bus campus microgrid.
    pub fn ucsd49() -> Self {
        Self::new(ucsd49()).expect("bundled network is valid")
    }

    pub fn index(&self) -> &BusIndex {
        &self.mat.index
    }

    pub fn voltages(&self, model: PowerFlowModel, scen: &PowerScenario, q_c: &DVector<f64>) -> Result<DVector<f64>> {
        match model {
            PowerFlowModel::Linear => self.mat.solve_lindistflow(scen, q_c),
            PowerFlowModel::Nonlinear => solve_distflow(&self.net, scen, q_c),
        }
    }
}

/// Text of the bundled 49-bus network file.
pub const UCSD49_NET: &str = include_str!("../../data/ucsd49.net");

pub fn ucsd49() -> GridNetwork {
    GridNetwork::parse(UCSD49_NET).expect("bundled network file parses")
}
