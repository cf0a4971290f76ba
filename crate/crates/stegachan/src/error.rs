//! Crate-wide error type.
//!
//! Failure modes that are expected outcomes rather than faults (quad
//! detection on a blank scene, BCH decode of an overly corrupted word)
//! have dedicated value types in their modules; this enum covers real
//! errors. The CLI maps variants onto distinct exit codes.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration: bad shapes, out-of-range parameters,
    /// inconsistent graph wiring.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problems with user-supplied data: missing files, undecodable
    /// images, malformed checkpoints.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or degenerate geometry encountered mid-run.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
