//! Dense `f64` tensors, a reverse-mode tape over a closed set of primitives,
//! and an Adam/AdamW optimizer.
//!
//! Everything trainable in this crate is built from the primitives on
//! [`Tape`]; each one has a finite-difference check in [`check`].

mod adam;
pub mod check;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, PadMode, Tape, Var, DEFAULT_MAX_CONV_TAPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient produced by `{op}` (tape record {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("singular matrix in {op} (batch entry {batch_index})")]
    Singular { op: &'static str, batch_index: usize },
}
