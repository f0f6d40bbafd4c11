use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("row {row} has every entry masked")]
    DegenerateMask { row: usize },
    #[error("non-finite gradient in parameter `{param}`")]
    NumericDivergence { param: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate entry: {0}")]
    Duplicate(String),
    #[error("user {user}: need {needed} negatives but only {available} candidates")]
    PoolExhausted {
        user: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("feature `{feature}` has unseen value `{value}`")]
    Encoding { feature: String, value: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("cold start: {0}")]
    ColdStart(String),
    #[error("paired differences have zero variance")]
    DegenerateTest,
    #[error("no users eligible for evaluation")]
    EmptyEvaluation,
    #[error("cluster {cluster} has {available} members, need {needed}")]
    SetSize {
        cluster: usize,
        needed: usize,
        available: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable category name, used for machine-readable error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::DegenerateMask { .. } => "degenerate-mask",
            Error::NumericDivergence { .. } => "numeric-divergence",
            Error::Parse { .. } => "parse",
            Error::Duplicate(_) => "duplicate",
            Error::PoolExhausted { .. } => "pool-exhausted",
            Error::Config(_) => "config",
            Error::Encoding { .. } => "encoding",
            Error::InsufficientData(_) => "insufficient-data",
            Error::ColdStart(_) => "cold-start",
            Error::DegenerateTest => "degenerate-test",
            Error::EmptyEvaluation => "empty-evaluation",
            Error::SetSize { .. } => "set-size",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}
