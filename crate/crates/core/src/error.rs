use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("unsupported format in {path}: {message}")]
    UnsupportedFormat { path: PathBuf, message: String },

    #[error("malformed mask: {0}")]
    MalformedMask(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} region too small to host a scribble of width {width}")]
    RegionTooSmall { class: u8, width: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("bad config: {0}")]
    Config(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    /// True when the failure came from a non-finite value inside the numeric engine.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Autodiff(AutodiffError::NonFinite { .. }))
    }

    /// True for errors caused by the caller's arguments rather than input data.
    pub fn is_argument(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Config(_))
    }
}
