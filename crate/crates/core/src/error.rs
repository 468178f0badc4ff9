use kfg_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{block}: {msg}")]
    Structure { block: &'static str, msg: String },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("kernel warehouse {warehouse:?}: {msg}")]
    Warehouse { warehouse: String, msg: String },
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub(crate) fn structure(block: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Structure {
            block,
            msg: msg.into(),
        }
    }
}

/// Failures reading or applying a weight file.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("bad magic: not a KFG1 weight file")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for {name:?}: model {expected:?}, file {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("alias mismatch for {name:?}: model shares with {expected:?}, file with {got:?}")]
    AliasMismatch {
        name: String,
        expected: String,
        got: String,
    },
}

impl WeightsError {
    /// Stable class name for machine-readable error lines.
    pub fn class(&self) -> &'static str {
        match self {
            WeightsError::BadMagic => "BadMagic",
            WeightsError::UnsupportedVersion(_) => "UnsupportedVersion",
            WeightsError::Truncated(_) => "Truncated",
            WeightsError::ChecksumMismatch { .. } => "ChecksumMismatch",
            WeightsError::Malformed(_) => "Malformed",
            WeightsError::MissingTensor(_) => "MissingTensor",
            WeightsError::UnexpectedTensor(_) => "UnexpectedTensor",
            WeightsError::ShapeMismatch { .. } => "ShapeMismatch",
            WeightsError::AliasMismatch { .. } => "AliasMismatch",
        }
    }
}
