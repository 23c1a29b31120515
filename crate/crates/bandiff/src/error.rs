//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV header in {path}: {detail}")]
    MalformedWav { path: PathBuf, detail: String },

    #[error("unsupported WAV encoding in {path}: {detail}")]
    UnsupportedWav { path: PathBuf, detail: String },

    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("component frequency {freq_hz} Hz is at or above Nyquist ({nyquist_hz} Hz)")]
    Aliasing { freq_hz: f64, nyquist_hz: f64 },

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: u32, right: u32 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("step index {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("signal too short: length {len}, need at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("shape violation: {0}")]
    Shape(String),

    #[error("non-finite value during {context} (step {step})")]
    NonFinite { context: String, step: u64 },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("token index {token} out of range for codebook of {entries} entries")]
    TokenOutOfRange { token: u32, entries: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
