use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("audio: {0}")]
    Audio(String),

    #[error("landmark schema: {0}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Audio(_) => "audio",
            Error::Schema(_) => "schema",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image(_) => "image",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
