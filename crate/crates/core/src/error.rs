use thiserror::Error;

use crate::gaussian::GaussianError;
use crate::nnkit::NnError;
use crate::rig::RigError;

/// Errors raised while evaluating or differentiating the avatar model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty feature track")]
    EmptyTrack,
    #[error("{what}: expected {expected}, got {got}")]
    Size { what: String, expected: usize, got: usize },
    #[error("zero-length view direction")]
    ZeroDirection,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("projected covariance of splat {0} is not positive definite")]
    NotPositiveDefinite(usize),
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Size {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}
