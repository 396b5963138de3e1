use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported magic {magic:?} (expected \"P5\")")]
    UnsupportedMagic { path: PathBuf, magic: String },
    #[error("{path}: malformed PGM header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: maxval {maxval} exceeds 255")]
    MaxvalTooLarge { path: PathBuf, maxval: u32 },
    #[error("{path}: truncated payload ({got} of {expected} bytes)")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{path}: sample {value} exceeds maxval {maxval}")]
    SampleAboveMaxval {
        path: PathBuf,
        value: u8,
        maxval: u32,
    },
    #[error("{path}: class index {value} out of range for k = {classes}")]
    ClassOutOfRange {
        path: PathBuf,
        value: u8,
        classes: usize,
    },
    #[error("{path}: no label found for image id {id:?}")]
    MissingLabel { path: PathBuf, id: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0}: empty dataset")]
    EmptyDataset(PathBuf),
    #[error("config {path}: {key}: {reason}")]
    Config {
        path: PathBuf,
        key: String,
        reason: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class {class} is absent from the ground truth; rates are undefined")]
    DegenerateClass { class: usize },
    #[error("model file {path}: {reason}")]
    ModelFormat { path: PathBuf, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
