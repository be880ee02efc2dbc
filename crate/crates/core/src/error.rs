//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent contract violated by an operation input.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Invalid configuration value (channel counts, windows, strides ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Entropy-coder failure (symbol outside CDF support, bad table ...).
    #[error("entropy coder: {0}")]
    Coder(String),

    /// Malformed or incompatible bitstream / checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),

    /// Checksum mismatch while decoding a frame record.
    #[error("corrupt frame record: crc mismatch (frame {frame})")]
    CrcMismatch { frame: usize },

    /// Dataset unusable for training (too short, empty ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
