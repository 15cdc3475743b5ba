use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),

    #[error("token index {index} is out of vocabulary (size {vocab})")]
    OutOfVocab { index: usize, vocab: usize },

    #[error(
        "empty feature map: sequence length {len} is shorter than effective filter height {height}; \
         pad sequences to at least the largest effective filter height"
    )]
    EmptyFeatureMap { len: usize, height: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid architecture at {stage}: {reason}")]
    Build { stage: String, reason: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at step {step}")]
    Divergence { step: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
