use std::path::PathBuf;

use crate::sampling::ModelId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("value {value} outside domain: {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("shape mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    ShapeMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("not enough foreground pixels: requested {requested}, available {available}")]
    NotEnoughForeground { requested: usize, available: usize },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("jpeg codec: {0}")]
    Jpeg(#[from] image::ImageError),

    #[error("invalid synthetic world: {0}")]
    InvalidWorld(String),

    #[error("negative SamScore {0}")]
    NegativeScore(f64),

    #[error("sample set is missing {} configuration(s), first: {}", .missing.len(), .missing.first().map(String::as_str).unwrap_or("?"))]
    MissingConfigs { missing: Vec<String> },

    #[error("sample set has no record for model {0}")]
    MissingModel(ModelId),

    #[error("invalid sample set: {0}")]
    InvalidSampleSet(String),

    #[error("non-finite input at index {0}")]
    NonFinite(usize),

    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("head {0} is not trained")]
    Untrained(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("run-length counts sum to {sum}, expected {expected}")]
    RleSum { sum: u64, expected: u64 },

    #[error("{path}: line {line}: {field}: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
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
