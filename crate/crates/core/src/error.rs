use std::path::Path;

use thiserror::Error;
use wxadapt_autograd::AutogradError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("no ground-truth prior: {0}")]
    MissingGroundTruth(String),
    #[error("training diverged at iteration {iteration}: {component} = {value}")]
    Diverged {
        iteration: usize,
        component: String,
        value: f64,
    },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

impl CoreError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CoreError::Io {
            path: path.display().to_string(),
            msg: err.to_string(),
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, CoreError::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
