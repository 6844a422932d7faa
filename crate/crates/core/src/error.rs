use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("step {step} out of range for a lattice with {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("process belongs to a different lattice")]
    LatticeMismatch,

    #[error("lattice mode not supported here: {0}")]
    UnsupportedMode(String),

    #[error("terminal order violated at node {node} (k={step}): {detail}")]
    TerminalOrder {
        node: usize,
        step: usize,
        detail: String,
    },

    #[error("obstacles not separated at node {node} (k={step}, state={state}): L={lower}, U={upper}")]
    Separation {
        node: usize,
        step: usize,
        state: f64,
        lower: f64,
        upper: f64,
    },

    #[error("stopping rules not ordered: {0}")]
    RuleOrder(String),

    #[error("implicit step did not converge at node {node} after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        node: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite value at node {node}: {what}")]
    NonFinite { node: usize, what: String },

    #[error("pasting did not terminate within {limit} segments on path {path}")]
    PastingDepth { path: usize, limit: usize },

    #[error("singular regression at step {step}: {detail}")]
    SingularRegression { step: usize, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
