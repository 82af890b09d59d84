use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the grading engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),

    #[error("signal placement failed: {0}")]
    Placement(String),

    #[error("polygon lies outside the image")]
    OutOfBounds,

    #[error("shape mismatch in {tensor}: {reason}")]
    Shape { tensor: String, reason: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("unknown nucleus {0}")]
    UnknownNucleus(usize),

    #[error("no class activation map for nucleus {id}: {reason}")]
    NoCam { id: usize, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config { field, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
