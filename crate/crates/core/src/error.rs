use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported bit depth in {path}: {depth} bits per sample")]
    UnsupportedBitDepth { path: PathBuf, depth: u16 },
    #[error("unsupported color type in {path}: {color}")]
    UnsupportedColorType { path: PathBuf, color: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown distortion type `{0}`")]
    UnknownDistortion(String),
    #[error("invalid distortion level {0}, expected 1..=5")]
    InvalidLevel(u8),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("missing score for triplet {triplet_id} ({role}, scorer {scorer})")]
    MissingScore {
        triplet_id: String,
        role: String,
        scorer: String,
    },
    #[error("unknown scorer `{0}`")]
    UnknownScorer(String),
    #[error("non-finite loss or gradient in record {0}")]
    NonFinite(String),
    #[error("{0}")]
    Config(String),
    #[error("no samples")]
    NoSamples,
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
