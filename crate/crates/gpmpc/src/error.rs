use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A numerical routine failed (e.g. a factorization that stayed
    /// indefinite after jitter escalation).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Malformed or incomplete data (datasets, logs, schedules).
    #[error("data error: {0}")]
    Data(String),
    /// The optimizer hit an unrecoverable condition.
    #[error("solver failure: {0}")]
    Solver(String),
    /// Inconsistent or out-of-range configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
