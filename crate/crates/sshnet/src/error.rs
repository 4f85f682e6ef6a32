//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by kernel construction, sampling, simulation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Vector/matrix dimensions do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input signal too short to populate every regressor row.
    #[error("insufficient input history: need at least {needed} samples, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    /// A factorization or decomposition failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An operation was called on an object in an unusable state.
    #[error("invalid state: {0}")]
    State(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON parse failure; `path` is the JSON pointer to the offending field.
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 I/O/parse, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_)
            | Error::Shape(_)
            | Error::InsufficientHistory { .. }
            | Error::State(_) => 1,
            Error::Io(_) | Error::Parse { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
