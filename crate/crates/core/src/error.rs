use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SeldError>;

#[derive(Debug, Error)]
pub enum SeldError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("track capacity exceeded: {count} events of class {class_id} in frame {frame} (max {max})")]
    Capacity {
        frame: u32,
        class_id: usize,
        count: usize,
        max: usize,
    },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SeldError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SeldError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        SeldError::InvalidInput(msg.into())
    }
}
