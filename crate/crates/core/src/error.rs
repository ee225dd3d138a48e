use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum FalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("class index {got} out of range for {classes} classes")]
    LabelOutOfRange { got: usize, classes: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("attack produced non-finite gradient at step {step}")]
    AttackDiverged { step: usize },

    #[error("csv parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error("client {client} failed in round {round}: {source}")]
    ClientFailed {
        client: usize,
        round: u64,
        #[source]
        source: Box<FalError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FalError>;

impl FalError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        FalError::InvalidArgument(msg.into())
    }
}
