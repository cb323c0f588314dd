use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the landmark pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes: expected \"MSTN\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u8),
    #[error("dtype mismatch: expected 1 (f64 little-endian), found {0}")]
    DtypeMismatch(u8),
    #[error("invalid tensor rank {0}; expected 1..=4")]
    InvalidRank(u8),
    #[error("truncated tensor file: header needs {expected} bytes, found {found}")]
    TruncatedHeader { expected: usize, found: usize },
    #[error("payload size mismatch: dims require {expected} values, payload holds {found_bytes} bytes")]
    SizeMismatch { expected: usize, found_bytes: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed PGM: {0}")]
    MalformedPgm(String),
    #[error("truncated PGM raster: expected {expected} bytes, found {found}")]
    TruncatedRaster { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("too few landmarks: {found} given, at least {required} required")]
    TooFewLandmarks { found: usize, required: usize },
    #[error("singular system: pivot {pivot:e} below threshold {threshold:e}")]
    Singular { pivot: f64, threshold: f64 },
    #[error("model weights have not been solved")]
    Unsolved,
    #[error("gradient root must be a scalar, found shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("threshold {0} would remove every landmark")]
    EmptySelection(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
