use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("threshold order: lo ({lo}) must not exceed hi ({hi})")]
    ThresholdOrder { lo: f64, hi: f64 },

    #[error("cannot encode box: {0}")]
    Encoding(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("NaN encountered in {0}")]
    NaN(String),

    #[error("channels ({channels}) not divisible by reduction ({reduction})")]
    Divisibility { channels: usize, reduction: usize },

    #[error("stride mismatch: expected {expected}, got {got}")]
    StrideMismatch { expected: usize, got: usize },

    #[error("infeasible placement: {0}")]
    InfeasiblePlacement(String),

    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
