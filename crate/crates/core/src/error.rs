use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or malformed.
    #[error("invalid config `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("Fock state |{n},{m}> exceeds truncation {truncation}")]
    TruncationExceeded { n: u32, m: u32, truncation: u32 },

    #[error("|g| = {0} must be below 1")]
    GainOutOfRange(f64),

    #[error("channel {channel} stream is not sorted at index {index}")]
    UnsortedStream { channel: u8, index: usize },

    #[error("brute-force oracle limited to {limit} tags per channel, got {got}")]
    OracleInputTooLarge { limit: usize, got: usize },

    #[error("{0} must be non-negative")]
    NegativeInput(&'static str),

    #[error("need at least {need} points, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("covariance is not finite")]
    NonFiniteCovariance,

    #[error("baseline must be positive to form a ratio")]
    NonPositiveBaseline,

    /// Malformed tag or scan file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
