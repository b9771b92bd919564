//! Dataset synthesis and supervised training.

mod dataset;
mod profiles;
mod train;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, sidecar_path, DatasetConfig, LabeledDataset, Provenance, Sample,
    DATASET_FORMAT_VERSION,
};
pub use profiles::{synthetic_days, ProfileConfig};
pub use train::{
    certifiable_cap, evaluate, fit_bundle, lipschitz_cap_for, train, write_history_csv, EpochStats, Evaluation, TrainConfig,
};

use crate::icnn::IcnnConfig;

/// Architecture used for the shipped controllers.
pub fn default_icnn_config() -> IcnnConfig {
    IcnnConfig::default()
}

/// Training schedule for the shipped controllers, capped so that the design
/// stepsize 0.1 certifies on a network with `‖X‖ = x_norm`.
pub fn default_train_config(x_norm: f64) -> TrainConfig {
    TrainConfig { lipschitz_cap: Some(certifiable_cap(0.1, x_norm, 0.9)), ..TrainConfig::default() }
}
