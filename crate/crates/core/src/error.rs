use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite numeric input: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset schema mismatch: {0}")]
    Schema(String),

    #[error("value is not recorded on this tape")]
    NotOnTape,

    #[error("insufficient support: {0}")]
    InsufficientSupport(String),

    #[error("no evidence rows match the query: {0}")]
    EmptyEvidence(String),

    #[error("ground-truth oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("unknown {kind} `{name}`; valid values: {valid}")]
    Unknown {
        kind: &'static str,
        name: String,
        valid: String,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("unsupported document version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<ndarray::ShapeError> for Error {
    fn from(e: ndarray::ShapeError) -> Self {
        Error::Shape(e.to_string())
    }
}
