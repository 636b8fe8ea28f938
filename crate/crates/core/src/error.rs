use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value (or a state outside a coefficient's domain) appeared
    /// during training. Recorded as "DV" by the harness.
    #[error("diverged at iteration {iteration}{}: {reason}", step_suffix(*.step))]
    Divergence {
        iteration: usize,
        step: Option<usize>,
        reason: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(s) => format!(", time step {s}"),
        None => String::new(),
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }

    /// Fills in the iteration/step of a divergence raised deep inside a sweep.
    /// Domain errors raised by model coefficients become divergences here: a
    /// forward path that leaves the coefficient domain is a diverged run.
    pub(crate) fn at(self, iteration: usize, step: usize) -> Self {
        match self {
            Error::Divergence { reason, step: s, .. } => Error::Divergence {
                iteration,
                step: s.or(Some(step)),
                reason,
            },
            Error::Domain(reason) => Error::Divergence {
                iteration,
                step: Some(step),
                reason,
            },
            other => other,
        }
    }
}
