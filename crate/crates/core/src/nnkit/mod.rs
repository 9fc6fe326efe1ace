//! Reverse-mode building blocks: parameter storage, dense layers, an LSTM
//! cell, Adam, and the checkpoint container.
//!
//! Every differentiable block records the intermediates of each `forward`
//! call on a private stack; `backward` consumes them in reverse order and
//! accumulates into the [`ParamStore`] gradient buffers.

pub mod checkpoint;
pub mod dense;
pub mod lstm;
pub mod encoding;
pub mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use dense::{sigmoid, Activation, DenseLayer, Mlp};
pub use lstm::LstmCell;
pub use params::{AdamConfig, LearningRates, Param, ParamGroup, ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{what}: expected {expected} elements, got {got}")]
    Shape { what: String, expected: usize, got: usize },
    #[error("backward called on {0} without a recorded forward pass")]
    NoForwardCache(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("non-finite gradient in parameter {param} at element {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
