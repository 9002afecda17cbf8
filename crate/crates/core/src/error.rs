use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint missing: {0}")]
    CheckpointMissing(String),

    #[error("checkpoint version mismatch: file has v{found}, expected v{expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum failure in {0}")]
    Checksum(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("layer index {index} out of range (backbone depth {depth})")]
    LayerOutOfRange { index: usize, depth: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("negative generator `{spec}` failed: {message}")]
    Generator { spec: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 1,
            Error::NonFinite(_)
            | Error::DegenerateBatch(_)
            | Error::UndefinedCorrelation(_)
            | Error::Tensor(_) => 3,
            _ => 2,
        }
    }
}
