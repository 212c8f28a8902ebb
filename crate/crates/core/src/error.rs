use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// The variants map onto the CLI exit codes: validation problems exit with 2,
/// numerical divergence with 3 and I/O failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("zero-variance dimensions in evaluation data: {0:?}")]
    ZeroVariance(Vec<usize>),

    #[error("logistic fit did not converge (final gradient norm {grad_norm:.3e})")]
    NonConvergence { grad_norm: f64 },

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonConvergence { .. } => 3,
            Error::Io { .. } | Error::Corrupt { .. } => 4,
            _ => 2,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
