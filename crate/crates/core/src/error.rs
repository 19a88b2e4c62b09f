use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid region: {0}")]
    Region(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "non-finite loss at epoch {epoch} batch {batch}: cls={cls} seg_ai={seg_ai} seg_ma={seg_ma}"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        cls: f64,
        seg_ai: f64,
        seg_ma: f64,
    },

    #[error("unknown report format `{0}`")]
    UnknownFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
