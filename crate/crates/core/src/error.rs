//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed file contents (WAV headers, checkpoints, manifests).
    #[error("format error: {0}")]
    Format(String),
    /// Length or dimension mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),
    /// A parameter outside its documented domain.
    #[error("parameter error: {0}")]
    Param(String),
    /// An API contract was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// External codec process failed.
    #[error("codec adapter error: {0}")]
    Adapter(String),
    /// Experiment configuration problem, names the offending key.
    #[error("config error: {0}")]
    Config(String),
    /// Embedding scoring failure (e.g. zero-norm embedding).
    #[error("scoring error: {0}")]
    Scoring(String),
}

pub type Result<T> = std::result::Result<T, Error>;
