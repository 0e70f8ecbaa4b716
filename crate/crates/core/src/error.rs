use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty score vector")]
    EmptyScores,

    #[error("empty bag")]
    EmptyBag,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: not a {magic} file")]
    BadMagic { path: PathBuf, magic: &'static str },

    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{path}: malformed file: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("inconsistent embedding dimension: bag {bag_id} has d_in={found}, expected {expected}")]
    InconsistentDim {
        bag_id: String,
        found: usize,
        expected: usize,
    },

    #[error("label out of range: bag {bag_id} has label {label}, class_count is {class_count}")]
    LabelOutOfRange {
        bag_id: String,
        label: usize,
        class_count: usize,
    },

    #[error("concept index {index} out of range (d_hid = {d_hid})")]
    ConceptOutOfRange { index: usize, d_hid: usize },

    #[error("unknown concept id {id}; valid ids: {valid:?}")]
    UnknownConcept { id: usize, valid: Vec<usize> },

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
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
