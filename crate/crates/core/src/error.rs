use thiserror::Error;
use trajrefine_numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset line {line}: field `{field}`: {message}")]
    Dataset {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid scenario `{id}`: {message}")]
    Scenario { id: String, message: String },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("non-finite loss on scenario `{0}`")]
    NonFiniteLoss(String),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
