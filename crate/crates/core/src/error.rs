//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failures surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input: bad shapes, out-of-range ids, invalid configuration values.
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An optimization run produced a non-finite loss.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// A file did not match its expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
