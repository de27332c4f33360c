use thiserror::Error;

#[derive(Debug, Error)]
pub enum HkrError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("verification error: {0}")]
    Verification(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HkrError>;
