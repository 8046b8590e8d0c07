use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid dropout rate {0}; expected 0 <= rate < 1")]
    InvalidRate(f64),

    #[error("loss is not a node of this tape")]
    DetachedGraph,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("input {input:?} is too small for the network: {detail}")]
    ShapeUnderflow { input: [usize; 3], detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown optimizer kind `{0}`")]
    UnknownOptimizer(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("truncated image: {0}")]
    TruncatedImage(String),

    #[error("pixel value {0} outside [0, 255]")]
    Range(f32),

    #[error("dataset at {0} contains no images")]
    EmptyDataset(PathBuf),

    #[error("failed to decode {} file(s): {}", .0.len(), format_decode_failures(.0))]
    Decode(Vec<(PathBuf, String)>),

    #[error("batch size {b_size} exceeds dataset size {len}")]
    BatchTooLarge { b_size: usize, len: usize },

    #[error("class count mismatch: network has {network}, dataset has {dataset}")]
    ClassCountMismatch { network: usize, dataset: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_decode_failures(failures: &[(PathBuf, String)]) -> String {
    failures
        .iter()
        .map(|(p, e)| format!("{}: {e}", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
