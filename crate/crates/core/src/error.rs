use std::path::PathBuf;

use himode_autograd::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HimodeError>;

#[derive(Debug, Error)]
pub enum HimodeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("metric error: {msg} ({pixels} pixel(s) affected)")]
    Metric { msg: String, pixels: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint error: {0}")]
    Version(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl HimodeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Domain(_) => 1,
            Self::Tensor(TensorError::Numeric(_)) => 3,
            Self::Tensor(_) => 1,
            Self::Io { .. } | Self::Format { .. } | Self::Manifest { .. } | Self::Version(_) => 2,
            Self::Metric { .. }
            | Self::Alignment(_)
            | Self::NonFiniteLoss { .. }
            | Self::GradCheck(_) => 3,
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HimodeError::Config(msg.into()))
}
