use thiserror::Error;

/// Errors raised by the identification library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cholesky factorization failed after jitter escalation (max jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("backend {backend} cannot be used with this model: {reason}")]
    BackendMismatch { backend: String, reason: String },

    #[error("unstable system: pole magnitude {0} >= 1")]
    UnstableSystem(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
