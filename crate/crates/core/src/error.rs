use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("trajectory too short: {len} steps (need at least 2)")]
    TooShort { len: usize },

    #[error("`{field}` has {actual} entries, expected {expected}")]
    Cardinality {
        field: String,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate task `{0}`: no tracking steps after the reference step")]
    DegenerateTask(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Configuration and validation failures map to exit code 1, everything
    /// else that happens while running maps to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Parse { .. }
                | Error::TooShort { .. }
                | Error::Cardinality { .. }
                | Error::DegenerateTask(_)
                | Error::Config(_)
                | Error::Integrity(_)
                | Error::Json(_)
        )
    }
}
