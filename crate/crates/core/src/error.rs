use thiserror::Error;

/// Errors raised by the tensor engine, model assembly and cost model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or ranks that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A hyper-parameter outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A caller violated an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),
    /// An operation was attempted in the wrong state (e.g. a consumed graph).
    #[error("state error: {0}")]
    State(String),
    /// NaN or infinity produced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An invalid model configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Integer arithmetic left the 64-bit range.
    #[error("range error: {0}")]
    Range(String),
    /// Malformed parameter manifest or I/O failure.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
