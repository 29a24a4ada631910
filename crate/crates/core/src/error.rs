use thiserror::Error;

/// Error variants shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Problem size outside the supported range (LP oracle bounds).
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    /// Configuration combination that is not implemented.
    #[error("unsupported config: {0}")]
    UnsupportedConfig(String),

    /// Scene generation could not satisfy a placement constraint.
    #[error("generation failed: {0}")]
    Generation(String),

    /// Non-finite loss or solver input; training aborts with diagnostics.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed scene / checkpoint / config text.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
