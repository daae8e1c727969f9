use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("expected 3 colour channels, got {0}")]
    ChannelCount(usize),

    #[error("pixel value {value} outside the {range:?} range")]
    Range { value: f32, range: crate::raster::ValueRange },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("input {height}x{width} is smaller than the minimum {min}x{min}")]
    Undersized { height: usize, width: usize, min: usize },

    #[error("feature extractor weights not found at {0} and no seeded fallback configured")]
    MissingWeights(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint array `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint is missing array `{0}`")]
    MissingArray(String),

    #[error("config fingerprint mismatch: checkpoint {checkpoint}, current {current}")]
    FingerprintMismatch { checkpoint: String, current: String },

    #[error("no sharp patches")]
    NoSharpPatches,

    #[error("degenerate samples: {0}")]
    Degenerate(&'static str),

    #[error("singular covariance")]
    SingularCovariance,

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("niqe model file: {0}")]
    ModelFile(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// fault inside the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Tensor(_) | Error::NonFinite(_))
    }
}
