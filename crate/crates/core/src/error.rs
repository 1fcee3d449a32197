use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("distribution lacks full support: {0}")]
    ZeroSupport(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("checksum mismatch")]
    Checksum,

    /// Training hit a non-finite value; carries the model from the last
    /// completed epoch (or the initial model).
    #[error("numerical abort: {msg}")]
    NumericalAbort {
        msg: String,
        checkpoint: Option<Box<crate::lm::LanguageModel>>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}
