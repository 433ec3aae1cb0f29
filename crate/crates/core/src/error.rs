use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("covariance is not symmetric: off-diagonals {upper} vs {lower}")]
    AsymmetricCovariance { upper: f64, lower: f64 },

    #[error("covariance is not positive semidefinite: smallest eigenvalue {min_eigenvalue}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate agent id {0}")]
    DuplicateAgent(u32),

    #[error("agent {0} paired with itself")]
    SelfPair(u32),

    #[error("need at least {needed} samples at alpha={alpha}, got {got}")]
    InsufficientSamples {
        needed: usize,
        got: usize,
        alpha: f64,
    },

    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
