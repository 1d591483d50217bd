use genvit_autograd::ArchiveError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("model state error: {0}")]
    ModelState(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("schema violation in record {record_id}: {reason}")]
    Schema { record_id: String, reason: String },
    #[error("non-finite loss at step {step}; offending records: {records:?}")]
    NonFiniteLoss { step: usize, records: Vec<String> },
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors the operator can fix by changing inputs or configuration.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. } | Error::Numeric(_) | Error::ModelState(_))
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
