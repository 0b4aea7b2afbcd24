use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt mask: {0}")]
    CorruptMask(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("failed to load record {record}: {reason}")]
    Load { record: String, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("scoring failed for record {record}: {reason}")]
    Scoring { record: String, reason: String },

    #[error("scoring service error: {0}")]
    Service(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by an unreachable or misbehaving external service.
    pub fn is_service(&self) -> bool {
        matches!(self, Error::Service(_) | Error::Scoring { .. })
    }
}
