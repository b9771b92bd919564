use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network topology: {0}")]
    Topology(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("power flow did not converge within {sweeps} sweeps (last max update {last_delta:e} p.u.)")]
    Divergence { sweeps: usize, last_delta: f64 },

    #[error("voltage collapse at bus {bus} ({magnitude:.4} p.u.)")]
    Collapse { bus: usize, magnitude: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("training diverged at epoch {epoch} with learning rate {learning_rate}")]
    TrainingDiverged { epoch: usize, learning_rate: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
