use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubflowError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty class or subclass: {0}")]
    EmptyGroup(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("missing source parameters for subclass ({0}, {1})")]
    MissingSource(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SubflowError>;
