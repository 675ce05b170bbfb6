use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("window at ({ox},{oy}) of size {sw}x{sh} exceeds {w}x{h} source", ox = origin.0, oy = origin.1, sw = size.0, sh = size.1, w = dims.0, h = dims.1)]
    OutOfBounds {
        origin: (usize, usize),
        size: (usize, usize),
        dims: (usize, usize),
    },

    #[error("dimension mismatch: expected {}x{}, found {}x{}", expected.0, expected.1, found.0, found.1)]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch norm evaluated before any running statistics exist")]
    BatchNormUninitialized,

    #[error("no noise map is at least {w}x{h}")]
    NoNoiseMap { w: usize, h: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),

    #[error(transparent)]
    Checkpoint(#[from] crate::net::CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
