use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {what}")]
    InvalidArgument { op: &'static str, what: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, what: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            what: what.into(),
        }
    }
}
