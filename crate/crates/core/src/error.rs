use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error(
        "batch norm running statistics are uninitialized; run at least one train-mode pass first"
    )]
    UninitializedStats,

    #[error("unsupported scale {0}: only positive integer scales give a regular grid")]
    UnsupportedScale(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch seeds {seeds:?}")]
    NonFiniteLoss { epoch: usize, seeds: Vec<u64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand used by shape checks throughout the crate.
pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
