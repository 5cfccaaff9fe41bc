use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no gradient has been computed for any trainable parameter")]
    MissingGradient,

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("routing: {0}")]
    Routing(String),

    #[error("mode: {0}")]
    Mode(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("report: {0}")]
    Report(String),

    #[error("non-finite value at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("frozen parameters were modified: {0}")]
    FrozenViolation(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
