use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatteError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid trimap value {value} at pixel {index} (allowed: 0, 0.5, 1)")]
    InvalidTrimapValue { value: f64, index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("resolution {height}x{width} is not divisible by {divisor}")]
    IndivisibleResolution { height: usize, width: usize, divisor: usize },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("input too small: {0}")]
    TooSmall(String),

    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),

    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MatteError> = std::result::Result<T, E>;
