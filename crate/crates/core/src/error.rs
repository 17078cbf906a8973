use thiserror::Error;

/// Errors produced by the clustering pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav decode error: {0}")]
    Wav(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training aborted: {0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;
