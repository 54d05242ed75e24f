use thiserror::Error;

/// Errors raised by models, estimators and the optimization loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Laplace approximation failed: {0}")]
    LaplaceFailure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pilot statistics do not cover level {level} (have {available} levels)")]
    InsufficientPilot { level: usize, available: usize },

    #[error("non-finite gradient at iteration {iter}: {detail}")]
    NonFiniteGradient { iter: usize, detail: String },

    #[error("dataset parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
