use thiserror::Error;

/// Errors shared by every layer of the stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// NaN/Inf where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed file contents (checkpoint, dataset, config).
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
