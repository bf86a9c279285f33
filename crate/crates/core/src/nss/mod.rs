//! Sine-task experiments on sampling perturbations: model building,
//! training, perturbed evaluation and the error-accumulation bound.

mod eval;
mod model;
mod task;
mod train;

pub use eval::{evaluate_perturbed, prop1_bound_check, NssReport, Prop1Input, Prop1Result, DIVERGENCE_THRESHOLD};
pub use model::{Evaluation, ForwardRecord, LayerStates, ModelConfig, Nonlinearity, NssModel, Prepared};
pub use task::{make_sine_task, perturb_grid, SineTask};
pub use train::{evaluate_loss, objective_loss, train_model, train_model_with, Objective, Sample, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::gradkit::GradError;
use crate::ssm::SsmError;

#[derive(Debug, Error)]
pub enum NssError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
