use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("matrix is not positive definite: pivot {index} = {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("running moments are uninitialized (count = 0)")]
    Uninitialized,

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { token: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    #[error("label mask selects no positions")]
    NoLabels,

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("cannot encode: {0}")]
    Encoding(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("turn {turn}: {source}")]
    Turn {
        turn: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::EmptyBatch(_) => "empty_batch",
            Error::NotPositiveDefinite { .. } => "numerical",
            Error::NonFinite(_) => "non_finite",
            Error::Uninitialized => "uninitialized",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Length { .. } => "length",
            Error::NoLabels => "no_labels",
            Error::Training { .. } => "training",
            Error::Config(_) => "config",
            Error::Generation(_) => "generation",
            Error::Encoding(_) => "encoding",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Turn { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}
