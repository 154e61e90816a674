use thiserror::Error;

#[derive(Debug, Error)]
pub enum FalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("scaling did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FalError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> FalError {
    FalError::InvalidArgument(msg.into())
}

pub(crate) fn ensure_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(FalError::ShapeMismatch { expected, actual })
    }
}
