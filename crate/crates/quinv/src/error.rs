//! Error type shared by all modules.

use thiserror::Error;

/// Failure modes of the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input.
    #[error("validation error: {0}")]
    Validation(String),

    /// A moment index required by a closed form is absent from the input set.
    #[error("missing moment index {index:?} (order {order})")]
    MissingMoment { index: Vec<u32>, order: u32 },

    /// Internal numerical fault (e.g. residual imaginary part beyond bounds).
    #[error("numerical fault: {0}")]
    Numerical(String),

    /// Iterative procedure failed to converge within its budget.
    #[error("convergence failure: {0}")]
    Convergence(String),

    /// File-format violation on input data.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn missing_moment(index: [u8; 3]) -> Self {
        Error::MissingMoment {
            index: index.iter().map(|&l| l as u32).collect(),
            order: index.iter().map(|&l| l as u32).sum(),
        }
    }
}
