use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("manifest contains no records")]
    EmptyManifest,

    #[error("manifest has no {0} records")]
    MissingSplit(&'static str),

    #[error("invalid image size {0}: must be a positive multiple of 32")]
    InvalidSize(usize),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("pyramid level {0} is missing")]
    MissingLevel(u8),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),

    #[error("epoch {epoch} out of range for a {epochs}-epoch schedule")]
    OutOfRange { epoch: usize, epochs: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("cannot aggregate an empty list of values")]
    EmptyList,

    #[error("ablation results lack the baseline configuration")]
    MissingBaseline,

    #[error("malformed metrics log {path}: {reason}")]
    MalformedLog { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
