use thiserror::Error;

/// Errors raised by the scheduling library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration failed at t = {time} (mode {mode}): {reason}")]
    Integration {
        time: f64,
        mode: usize,
        reason: String,
    },

    #[error("curve/schedule mismatch: {0}")]
    Mismatch(String),

    #[error("degenerate insertion gradient on [{start}, {end}]: {reason}")]
    Degenerate {
        start: f64,
        end: f64,
        reason: String,
    },

    #[error("ambiguous crossing in [{start}, {end}] after refinement")]
    AmbiguousCrossing { start: f64, end: f64 },

    #[error("switching-time type failure: {0}")]
    TypeFailure(String),

    #[error("line search failed after {trials} trials (gamma0 = {gamma0}, gamma3 = {gamma3}); trial costs: {costs:?}")]
    LineSearch {
        trials: usize,
        gamma0: f64,
        gamma3: f64,
        costs: Vec<f64>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("network error: {0}")]
    Network(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SchedError>;

impl From<std::io::Error> for SchedError {
    fn from(e: std::io::Error) -> Self {
        SchedError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SchedError {
    fn from(e: serde_json::Error) -> Self {
        SchedError::Parse(e.to_string())
    }
}
