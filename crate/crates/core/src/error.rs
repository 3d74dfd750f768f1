use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("consensus did not reach tolerance {tau:e} within {round_cap} rounds (achieved deviation {deviation:e})")]
    ConsensusNotConverged {
        tau: f64,
        round_cap: usize,
        deviation: f64,
    },

    #[error("bisection failed: {0}")]
    Bisection(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("topology: {0}")]
    Topology(String),

    #[error("data: {0}")]
    Data(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
