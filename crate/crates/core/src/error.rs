use std::path::PathBuf;

use crate::types::InstanceKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point ({x}, {y}) already labeled for instance {key}")]
    DuplicatePoint { key: InstanceKey, x: u32, y: u32 },

    #[error("point ({x}, {y}) lies outside the box of instance {key}")]
    OutOfBox { key: InstanceKey, x: u32, y: u32 },

    #[error("unknown instance {0}")]
    UnknownInstance(InstanceKey),

    #[error("invalid constant: {0}")]
    InvalidConstant(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("no valid scene after {attempts} attempts (over-constrained generator config)")]
    GenerationExhausted { attempts: usize },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format violation in {path} at byte {offset}: {message}")]
    FormatViolation {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("corrupt manifest {path}: {message}")]
    CorruptManifest { path: PathBuf, message: String },

    #[error("mask for instance {0} was already queried")]
    DuplicateMaskQuery(InstanceKey),

    #[error("annotator cannot answer {0}")]
    Unsupported(&'static str),

    #[error("no answer yet for query {0}")]
    AnnotatorTimeout(u64),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("prediction mode {0} is unavailable for this model state")]
    ModeUnavailable(char),

    #[error("no supervision samples")]
    EmptySupervision,

    #[error("non-finite model parameters after training")]
    NonFinite,

    #[error("probability {0} outside [0, 1]")]
    DomainError(f64),

    #[error("empty prediction set")]
    EmptyPredictionSet,

    #[error("variance needs at least two predictions, got {0}")]
    InsufficientPredictions(usize),

    #[error("every box pixel of instance {0} is already labeled")]
    EmptyDomain(InstanceKey),

    #[error("mask extents differ: {0:?} vs {1:?}")]
    ExtentMismatch((u32, u32), (u32, u32)),

    #[error("empty point set")]
    EmptyPointSet,

    #[error("instance {0} has an empty visible mask")]
    EmptyMask(InstanceKey),

    #[error("run directory {0} lacks point sets")]
    MissingPointSets(PathBuf),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
