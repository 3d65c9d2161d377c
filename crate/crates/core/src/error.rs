use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (NaN, infinities, bad ε).
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller violated a precondition (dimension mismatch, bad permutation, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Internal consistency check failed.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("simulation failed at step {step}: {reason}")]
    Simulation { step: usize, reason: String },

    /// A solver iterate, gradient, or constraint value became non-finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by non-finite numbers or diverging simulations.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Simulation { .. } | Error::Domain(_))
    }
}
