use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid phantom config: {0}")]
    InvalidPhantom(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("record `{record}`: {reason}")]
    Load { record: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("mask is empty")]
    EmptyMask,

    #[error("mask has a single positive location; std is undefined")]
    DegenerateMask,

    #[error("organ masks overlap at {0} pixels")]
    OverlappingMasks(usize),

    #[error("mask is not binary")]
    NonBinaryMask,

    #[error("probabilities do not sum to one (max deviation {0:.3e})")]
    NotNormalized(f64),

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("architecture mismatch: checkpoint {found}, expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
