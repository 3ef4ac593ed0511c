use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum SolarError {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("inverted signal: {0}")]
    InvertedSignal(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SolarError>;
