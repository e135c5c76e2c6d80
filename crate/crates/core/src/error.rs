use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error at `{key}`: {msg}")]
    Parse { key: String, msg: String },
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale activation cache: {0}")]
    StaleCache(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("csv error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("weights file error: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
