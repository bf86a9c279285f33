//! Irregularly sampled pendulum images: generator, corruption, dataset
//! files and the paired regression with and without the gate.

mod data;
mod io;
mod regress;

pub use data::{
    corrupt_frames, generate_dataset, generate_sample, render_frame, simulate_angles, simulate_states, PendulumConfig, PendulumDataset,
    PendulumSample, MAX_SUBSTEP,
};
pub use io::{frame_pgm, load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use regress::{mean_predictor_mse, run_regression, run_regression_threads, to_sample, RegressionConfig, RegressionReport, VariantResult};

use thiserror::Error;

use crate::nss::NssError;

#[derive(Debug, Error)]
pub enum PendulumError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] NssError),
}
