use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label value {0} is outside the vocabulary {{0, 1, 2, 4}}")]
    LabelOutOfVocabulary(f64),
    #[error("invalid label {0}")]
    InvalidLabel(u8),
    #[error("non-finite voxel value at linear index {0}")]
    NonFiniteVoxel(usize),
    #[error("degenerate intensity: {0}")]
    DegenerateIntensity(String),
    #[error("source {source_dims:?} is smaller than crop {crop:?}")]
    SourceTooSmall {
        source_dims: [usize; 3],
        crop: [usize; 3],
    },
    #[error("brain mask is empty")]
    EmptyBrainMask,
    #[error("no modality present")]
    NoModalities,
    #[error("need at least 2 available modalities, found {0}")]
    TooFewModalities(usize),
    #[error("requested {requested} samples but only {available} ids are available")]
    InsufficientSamples { requested: usize, available: usize },
    #[error("need at least 2 training ids to form pairs, found {0}")]
    TooFewSamples(usize),
    #[error("non-finite loss during {stage} at epoch {epoch}: l_seg={l_seg}, l_kd={l_kd}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        l_seg: f64,
        l_kd: f64,
    },
    #[error("split '{0}' has no samples")]
    EmptySplit(String),
    #[error("report is missing combination {0}")]
    MissingCombination(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("conflicting configuration: {0}")]
    ConfigConflict(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn header(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedHeader {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
