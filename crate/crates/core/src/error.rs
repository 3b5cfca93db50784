use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid network: {0}")]
    Network(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {0}")]
    Truncated(String),
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("csv row {row}, column `{column}`: cannot parse {value:?} as a number")]
    CsvCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("checkpoint digest mismatch: header says {expected}, payload hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
