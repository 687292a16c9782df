use alloc::{boxed::Box, string::String, vec::Vec};

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    /// A dataset failed validation.
    #[error("validation error: {0}")]
    Validation(String),
    /// The model specification is inconsistent with itself or with the data.
    #[error("model specification error: {0}")]
    Spec(String),
    /// An exponent passed the overflow guard.
    #[error("overflow guard: exponent {0} exceeds 700")]
    Overflow(f64),
    /// Factorisation or linear algebra broke down.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("Newton iteration did not converge after {iterations} iterations (max |gradient| = {max_gradient:e})")]
    NotConverged {
        iterations: usize,
        max_gradient: f64,
        last: Vec<f64>,
    },
    #[error("hyperparameter optimisation exceeded {evaluations} evaluations")]
    BudgetExceeded { evaluations: usize, best: Vec<f64> },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
