use thiserror::Error;

/// Errors produced by the boostnet library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}: per-exit losses {per_exit_loss:?}")]
    Diverged { step: usize, per_exit_loss: Vec<f64> },

    #[error("budget {tau} is below the first-exit cost {min_cost}")]
    InfeasibleBudget { tau: f64, min_cost: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by invalid user configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InfeasibleBudget { .. })
    }

    /// True for errors caused by numerical failure (divergence, NaN/inf).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
