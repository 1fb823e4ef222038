use thiserror::Error;

/// Errors raised by the pruning engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration violates its invariants.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation received arguments of the wrong shape or range.
    #[error("argument error: {0}")]
    Argument(String),
    /// Run state is inconsistent with the requested operation.
    #[error("state error: {0}")]
    State(String),
    /// Input data is unusable (NaN scores and the like).
    #[error("data error: {0}")]
    Data(String),
    /// A non-finite value appeared during the forward pass.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A trace or report file could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// Command-line flags are invalid or conflict.
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
