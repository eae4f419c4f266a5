//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps each variant class to a
/// stable process exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad field values, missing files named in config).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (reports, triplet files, images).
    #[error("input error: {0}")]
    Input(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint / query-set / provider dimensions do not agree.
    #[error("compatibility error: {0}")]
    Compat(String),

    /// Tensor shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Negative sampling has no pool to draw from.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A verification check (gradcheck) failed.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Input(format!("json: {e}"))
    }
}

impl Error {
    /// Stable exit codes: 0 ok, 1 check failure, 2 config, 3 I/O,
    /// 4 numeric, 5 compatibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 1,
            Error::Config(_) | Error::Input(_) | Error::Sampling(_) => 2,
            Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            Error::Compat(_) | Error::Shape(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
