use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the simulator.
///
/// Variants fall into two categories: input validation (bad specs, malformed
/// files, inconsistent configs) and runtime failures (numerical divergence,
/// exhausted pools, I/O). [`Error::is_validation`] tells them apart so the CLI
/// can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: line {line}: field `{field}`: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("example {id}: {message}")]
    InvalidExample { id: u64, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cluster {cluster} exhausted: needed {needed} examples, pool holds {available}")]
    PoolExhausted {
        cluster: String,
        needed: usize,
        available: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("run failed at episode {t}: {source}")]
    Episode {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("input hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure was caused by user input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig(_)
            | Error::Parse { .. }
            | Error::InvalidExample { .. }
            | Error::DimensionMismatch { .. }
            | Error::HashMismatch { .. } => true,
            Error::Episode { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
