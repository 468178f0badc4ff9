use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}:{line}: {msg}")]
    Label { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: class {class} out of range for nc={nc}")]
    ClassRange {
        path: PathBuf,
        line: usize,
        class: usize,
        nc: usize,
    },
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(#[from] kfg_core::CoreError),
    #[error(transparent)]
    Tensor(#[from] kfg_tensor::TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl EvalError {
    /// Stable class name for machine-readable error lines.
    pub fn class(&self) -> &'static str {
        match self {
            EvalError::Label { .. } => "LabelFormat",
            EvalError::ClassRange { .. } => "ClassRange",
            EvalError::Image { .. } => "ImageFormat",
            EvalError::Dataset(_) => "Dataset",
            EvalError::Core(_) | EvalError::Tensor(_) => "Model",
            EvalError::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;
