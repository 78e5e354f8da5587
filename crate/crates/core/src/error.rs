use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (minimum eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),

    #[error("eigensolver did not converge after {0} sweeps")]
    EigNoConvergence(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variables belong to different tapes")]
    TapeMismatch,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("unknown domain {0}")]
    UnknownDomain(String),

    #[error("statistics for {0} are not initialized")]
    Uninitialized(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("retraction failed: {0}")]
    Retraction(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("length mismatch in {path}: {detail}")]
    LengthMismatch { path: PathBuf, detail: String },

    #[error("corrupt header in {path}: {detail}")]
    CorruptHeader { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::NotPositiveDefinite(_)
            | Error::NotSymmetric(_)
            | Error::EigNoConvergence(_)
            | Error::NonFinite(_)
            | Error::Diverged(_)
            | Error::Retraction(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
