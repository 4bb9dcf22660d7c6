use thiserror::Error;

/// Errors produced by the optimization engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("reward propagation: {0}")]
    Propagation(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
