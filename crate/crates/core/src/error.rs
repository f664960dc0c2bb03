use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("directory does not exist: {0}")]
    MissingDirectory(PathBuf),

    #[error("no files in {dir} match pattern {pattern}")]
    NoMatchingFiles { dir: PathBuf, pattern: String },

    #[error("invalid file pattern {0:?}: expected exactly one %d / %0Nd placeholder")]
    BadPattern(String),

    #[error("{path}: dimensions {found:?} differ from {expected:?}")]
    DimensionMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{path}: unsupported image format ({detail})")]
    UnsupportedImage { path: PathBuf, detail: String },

    #[error("{path}: unmapped value {value}")]
    UnmappedValue { path: PathBuf, value: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
