use std::path::PathBuf;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("no valid camera placement after {attempts} attempts")]
    CameraPlacement { attempts: usize },
    #[error("training diverged at step {step} (non-finite loss); last good state saved to {saved}")]
    Diverged { step: usize, saved: PathBuf },
    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }
}
