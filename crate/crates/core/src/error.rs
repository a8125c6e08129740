use thiserror::Error;

use tdiv_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("no feasible path: {0}")]
    NoFeasiblePath(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::Autodiff(
                    AutodiffError::NonFiniteValue { .. }
                        | AutodiffError::NonFiniteGradient { .. }
                        | AutodiffError::Singular { .. }
                        | AutodiffError::IllConditioned { .. }
                )
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
