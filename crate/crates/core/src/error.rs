use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

/// Errors produced anywhere in the attack pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("cannot decode audio {}: {msg}", .path.display())]
    Decode { path: PathBuf, msg: String },

    #[error("audio is empty: {}", .0.display())]
    EmptyAudio(PathBuf),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("failed to load model: {0}")]
    Load(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("transcription backend failed: {0}")]
    Backend(String),

    #[error("non-finite loss at step {step}: {breakdown:?}")]
    Numerical { step: u64, breakdown: Box<LossBreakdown> },

    #[error("unknown clip id: {0}")]
    UnknownClip(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
