use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or configuration dimensions that do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A parsed file did not follow its format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch in field `{field}`")]
    ConfigMismatch { field: &'static str },

    #[error("stale activation cache: canvas prefix changed since position {0}")]
    StaleCache(usize),

    #[error("loss became non-finite at step {step} (last finite loss {last_finite})")]
    NonFiniteLoss { step: u64, last_finite: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by files on disk rather than by values.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Json { .. } | Error::Format { .. } | Error::Checkpoint(_)
        )
    }
}
