use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariate and response bounds are required to compute a Lipschitz constant")]
    MissingDomainBounds,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("privacy regime violation: {0}")]
    Regime(String),

    #[error("{buckets} buckets need at least {needed} samples, got {n}; use more samples or a larger failure probability")]
    TooFewSamples { buckets: usize, needed: usize, n: usize },

    #[error("rejection sampler gave up after {0} attempts")]
    RejectionCap(u64),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
