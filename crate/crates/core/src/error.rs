use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty particle batch")]
    EmptyBatch,

    #[error("blow-up: non-finite position for particle {particle} at time node {node}")]
    BlowUp { particle: usize, node: usize },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("sampling failure: {accepted} of {proposals} proposals accepted (rate {rate:.3e})")]
    SamplingFailure {
        proposals: u64,
        accepted: u64,
        rate: f64,
    },

    #[error("capability not supported by this model: {0}")]
    Capability(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {what} in epoch {epoch}; epoch discarded")]
    NonFinite { what: &'static str, epoch: usize },

    #[error("run cancelled")]
    Cancelled,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Exit code contract: 0 success, 1 numeric failure, 2 usage/config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidParameter(_) => 2,
            _ => 1,
        }
    }
}
