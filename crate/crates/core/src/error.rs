//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or batch had the wrong shape for the requested operation.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A function evaluation produced a non-finite value.
    #[error("non-finite value while {context} (coordinate {coordinate})")]
    NonFinite {
        context: &'static str,
        coordinate: usize,
    },

    /// A training/attack configuration is internally inconsistent.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },

    /// IDX container parsing failed.
    #[error(transparent)]
    Idx(#[from] crate::data::IdxError),

    /// Checkpoint (de)serialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
