use thiserror::Error;

/// Errors raised by the dehazing library.
#[derive(Debug, Error)]
pub enum DehazeError {
    /// Tensor / frame shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A scalar parameter is out of its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A caller-side contract was violated (missing state, wrong call order).
    #[error("contract error: {0}")]
    Contract(String),
    /// A non-finite value surfaced where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DehazeError>;

impl DehazeError {
    pub fn dim(msg: impl Into<String>) -> Self {
        DehazeError::Dimension(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        DehazeError::Parameter(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        DehazeError::Contract(msg.into())
    }
}
