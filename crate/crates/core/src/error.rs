use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown class name `{0}`")]
    UnknownClass(String),

    #[error("annotation references missing image `{0}`")]
    MissingImage(String),

    #[error("annotation references unknown annotator `{0}`")]
    UnknownAnnotator(String),

    #[error("image `{image_id}`: expected {expected_width}x{expected_height} pixels, found {width}x{height}")]
    DimensionMismatch {
        image_id: String,
        expected_width: usize,
        expected_height: usize,
        width: usize,
        height: usize,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("could not place {requested} objects without overlap (placed {placed})")]
    Placement { requested: usize, placed: usize },

    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
