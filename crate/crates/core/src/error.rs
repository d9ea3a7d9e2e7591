use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite state")]
    NonFinite,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("negative scale {0}")]
    NegativeScale(f64),

    /// A config field failed validation; `key` is the JSON key path.
    #[error("invalid config at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// The forward or backward recursion produced a non-finite state.
    #[error("non-finite state at layer {layer}")]
    Explosion { layer: usize },

    #[error("divergence at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("iteration {0} was not recorded")]
    Unrecorded(usize),

    #[error("parameter sets are not coupled: {0}")]
    Uncoupled(String),

    #[error("degenerate design matrix")]
    Degenerate,

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors that signal numerical blow-up rather than misuse.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::NonFinite | Error::Explosion { .. } | Error::Divergence { .. }
        )
    }
}
