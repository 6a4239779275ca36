use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("step {t} out of range 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("malformed schedule: {0}")]
    MalformedSchedule(String),

    #[error("operation requires a {expected} schedule")]
    WrongBackend { expected: &'static str },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Non-finite loss or gradient during guided sampling; carries the trace
    /// recorded up to the failure.
    #[error("guidance aborted at step {t}: {reason}")]
    Aborted {
        t: usize,
        reason: String,
        trace: Box<crate::guidance::Trace>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by NaN/inf values or divergence rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. } | Error::Aborted { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
