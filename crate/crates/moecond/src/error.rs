//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector shapes incompatible with the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid configuration (bad counts, budgets, unknown keys, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Operation called against state it does not match (wrong regime,
    /// missing condenser set, decision from a different forward, ...).
    #[error("state error: {0}")]
    State(String),

    /// A numeric evaluation produced a non-finite or otherwise unusable value.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Brute-force oracle refused an instance too large to enumerate.
    #[error("oracle limit exceeded: n={n} (max {max})")]
    OracleTooLarge { n: usize, max: usize },

    /// Training aborted because the loss became non-finite.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed checkpoint, config file, or run artifact.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
