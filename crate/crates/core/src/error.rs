use thiserror::Error;

/// Errors produced by the molecular-map pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The physical model would produce a probability outside `[0, 1)`.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-invertible input: {0}")]
    NonInvertible(String),

    /// A pixel whose detector frequencies map to a non-positive first power sum.
    #[error("degenerate pixel: recovered S_1 = {0}")]
    DegeneratePixel(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
