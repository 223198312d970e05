use std::io;

use thiserror::Error;

/// Errors produced across the detection pipeline.
#[derive(Debug, Error)]
pub enum McfError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("failed to load {what}: {reason}")]
    Load { what: String, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// A feature asked for a layer that has not been computed yet. This is a
    /// sequencing bug in the caller, not a data problem.
    #[error("layer {layer} requested before it was computed")]
    LazyOrder { layer: usize },

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("model format: {0}")]
    Json(#[from] serde_json::Error),
}

impl McfError {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            McfError::Config(_) | McfError::LazyOrder { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = McfError> = std::result::Result<T, E>;
