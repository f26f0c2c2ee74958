use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems found while reading a manifest, tagged with the offending line.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManifestError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("label {0:?} is not one of covid_positive, cap, healthy, unknown")]
    Taxonomy(String),
    #[error("image {path} is {height}x{width}, smaller than the 8x8 minimum")]
    Undersized {
        path: String,
        height: usize,
        width: usize,
    },
    #[error("image {path} could not be read: {message}")]
    Image { path: String, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {kind}")]
    Manifest { line: u64, kind: ManifestError },
    #[error("patients file: {0}")]
    Patients(String),
    #[error("image decode: {0}")]
    ImageDecode(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("window {window} must be odd, at least 3 and at most {limit}")]
    InvalidWindow { window: usize, limit: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("dataset has {found} groups; at least 3 are needed to split")]
    TooFewGroups { found: usize },
    #[error("no lung findings to classify")]
    NoSegments,
    #[error("model exposes no final-convolution capture point")]
    NoCapturePoint,
    #[error("severity undefined: initial Q is 0 but current Q is {q_current}; re-baseline first")]
    UndefinedBaseline { q_current: f64 },
    #[error("need at least {needed} points, found {found}")]
    InsufficientPoints { needed: usize, found: usize },
    #[error("cannot load model {}: {message}", path.display())]
    ModelLoad { path: PathBuf, message: String },
    #[error("invalid medication event: {0}")]
    InvalidMedication(String),
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error("aborted: {0}")]
    Aborted(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: crate::pipeline::Stage,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// The pipeline stage an error is attributed to, if any.
    pub fn stage(&self) -> Option<crate::pipeline::Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
