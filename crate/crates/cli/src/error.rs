use thiserror::Error;

use kfg_core::{CoreError, WeightsError};
use kfg_eval::EvalError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    CheckFailed(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<WeightsError> for CliError {
    fn from(e: WeightsError) -> Self {
        CliError::Core(CoreError::Weights(e))
    }
}

fn core_class(e: &CoreError) -> &'static str {
    match e {
        CoreError::Config(_) | CoreError::ConfigLine { .. } => "Config",
        CoreError::Weights(w) => w.class(),
        CoreError::Io(_) => "Io",
        _ => "Model",
    }
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Core(e) | CliError::Eval(EvalError::Core(e)) => core_class(e),
            CliError::Eval(e) => e.class(),
            CliError::CheckFailed(_) => "CheckFailed",
            CliError::Io(_) => "Io",
        }
    }

    /// 2 for invalid invocations or configuration, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "Usage" | "Config" => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
