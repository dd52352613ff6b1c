use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline, grouped into the categories the CLI
/// maps onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric-domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error at {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NumericDomain {
            op,
            detail: detail.into(),
        }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err,
        }
    }

    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Contract(_) | Error::Dimension { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::NumericDomain { .. } => 5,
        }
    }
}
