use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("singular 3x3 system (pivot {pivot:e})")]
    Singular { pivot: f64 },

    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error(
        "implicit solve did not converge in {iterations} iterations (last update {residual:e})"
    )]
    Diverged { iterations: usize, residual: f64 },

    #[error("constraint multiplier equation has no real root (discriminant {discriminant:e}); reduce the step size")]
    NoRealRoot { discriminant: f64 },

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::StepFailed {
            step,
            source: Box::new(self),
        }
    }
}
