use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum IvError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("instrument irrelevant: complier probability is zero")]
    InstrumentIrrelevant,

    #[error("degenerate stratum: zero denominator in {0}")]
    DegenerateStratum(&'static str),

    #[error("selector index {index} out of range for covariate row of length {len}")]
    SelectorOutOfRange { index: usize, len: usize },

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("row {row} column {column} {reason}")]
    Data {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IvError>;
