use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LeafError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LeafError {
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape(Vec<usize>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty sequence: LSTM input needs at least one time step")]
    EmptySequence,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

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
}

impl LeafError {
    /// Process exit status: 2 usage or configuration, 3 data or files,
    /// 4 numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            LeafError::Numeric(_) | LeafError::EmptySequence => 4,
            LeafError::Dataset(_)
            | LeafError::Format { .. }
            | LeafError::Io { .. }
            | LeafError::Image { .. }
            | LeafError::Json(_) => 3,
            LeafError::InvalidShape(_)
            | LeafError::Shape(_)
            | LeafError::Label { .. }
            | LeafError::Config(_)
            | LeafError::Parameter(_)
            | LeafError::Contract(_) => 2,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LeafError::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LeafError::Io { path: path.into(), source }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        LeafError::Format { offset, message: message.into() }
    }
}
