//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the CLI maps variants onto
//! process exit codes (I/O = 2, numerical divergence = 3, shape or config
//! mismatch = 4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("non-finite value in `{part}`: {value}")]
    NonFinite { part: String, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("class count mismatch: checkpoint has {checkpoint}, data has {data}")]
    ClassMismatch { checkpoint: usize, data: usize },

    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
