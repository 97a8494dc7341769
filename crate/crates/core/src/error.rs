use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("linear system is numerically singular ({0})")]
    Singular(&'static str),

    #[error("zero support under the behavior distribution at (s, a) pairs {0:?}")]
    ZeroSupport(Vec<(usize, usize)>),

    #[error("absolute continuity violated: {0}")]
    InfiniteKl(String),

    #[error("policy ratio undefined: behavior probability is zero at (s={state}, a={action}) where the target policy is positive")]
    RatioUndefined { state: usize, action: usize },

    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: usize,
        detail: String,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("rewards are constant ({0}); normalization would divide by zero")]
    ConstantReward(f64),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("run aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
