use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("rank-deficient pilot matrix (condition {smallest:e} / {largest:e} of the normal matrix)")]
    RankDeficient { smallest: f64, largest: f64 },

    #[error("zero-norm reference channel")]
    ZeroNorm,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("malformed data at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing network for estimator `{0}`")]
    MissingNetwork(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
