use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    /// Input data or configuration violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in encoder block {block}")]
    NonFiniteActivation { block: usize },

    #[error("non-finite loss at step {step} (config {config_hash}, clips {clip_ids:?})")]
    NonFiniteLoss {
        step: u64,
        config_hash: String,
        clip_ids: Vec<String>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Precondition(_) | Error::Shape(_) | Error::Parse { .. }
        )
    }
}

// `!(x > 0.0)` is deliberate: it also rejects NaN.
macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
