use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Spatial extent incompatible with the network's downsampling chain.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at iteration {iteration}, resolution 1/{resolution}: {what}")]
    NonFinite {
        iteration: usize,
        resolution: usize,
        what: String,
    },

    #[error("non-finite {0} (caller must sanitize)")]
    NaNInput(&'static str),

    #[error("empty evaluation domain: {0}")]
    EmptyDomain(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by bad numerics rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NaNInput(_))
    }

    /// True for failures in reading or validating on-disk data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Malformed { .. }
                | Error::MissingFile(_)
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Json(_)
                | Error::Checkpoint(_)
        )
    }
}
