use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("predictor failed on sample {sample_id}: {source}")]
    Predictor {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged in {stage} at step {step}: loss = {loss}")]
    Divergence { stage: String, step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Input(_) => ErrorCategory::Data,
            Error::Predictor { source, .. } => source.category(),
            Error::Transport { .. }
            | Error::Protocol(_)
            | Error::Divergence { .. }
            | Error::Io { .. } => ErrorCategory::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
