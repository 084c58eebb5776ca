use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{primitive}`")]
    Numeric { primitive: String },

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("step size underflow at t={t:.6e} (h={h:.3e})")]
    Stiffness { t: f64, h: f64 },

    #[error("integration exceeded the budget of {steps} steps")]
    StepBudget { steps: usize },

    #[error("eigenvalue iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("training diverged at step {step}: total loss {total:.3e}")]
    Divergence { step: usize, total: f64 },

    #[error("malformed checkpoint {path:?}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
