use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("time order violated: t1 = {t1} precedes t0 = {t0}")]
    TimeOrder { t0: f64, t1: f64 },

    #[error("adaptive solver did not converge on [{t0}, {t1}] within {steps} steps")]
    NonConvergence { t0: f64, t1: f64, steps: usize },

    #[error("numerical blow-up: {0}")]
    NumericalBlowup(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("timestamps of `{event}` are not sorted at position {position}")]
    Ordering { event: String, position: usize },

    #[error("timestamp {t} of `{event}` lies outside [0, 1]")]
    Normalization { event: String, t: f64 },

    #[error("sequence `{event}` has {len} posts; at least {min} are required")]
    TooSmall {
        event: String,
        len: usize,
        min: usize,
    },

    #[error("unknown event `{0}`")]
    UnknownEvent(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NumericalBlowup(_)
                | Error::NonFiniteGradient(_)
                | Error::Divergence { .. }
        )
    }
}
