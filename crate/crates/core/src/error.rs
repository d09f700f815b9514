use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The support mask has no foreground cell once brought to feature
    /// resolution; usually a crack that is too thin for the feature stride.
    #[error("support mask has no foreground cell at {height}x{width} feature resolution")]
    EmptyForeground { height: usize, width: usize },

    #[error("mask has no background cell at {height}x{width} feature resolution")]
    EmptyBackground { height: usize, width: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("failed to load dataset: {0}")]
    Load(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Degenerate-mask errors are recoverable per episode.
    pub fn is_degenerate_mask(&self) -> bool {
        matches!(self, Error::EmptyForeground { .. } | Error::EmptyBackground { .. })
    }
}
