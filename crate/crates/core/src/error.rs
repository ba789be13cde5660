use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid band [{lo}, {hi}] Hz for sampling rate {fs} Hz")]
    InvalidBand { lo: f64, hi: f64, fs: f64 },

    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("heart-rate estimation failed: {0}")]
    Estimation(String),

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("invalid frame sequence: {0}")]
    InvalidFrames(String),

    #[error("synchronization failed: {0}")]
    Sync(String),

    #[error("schema error in {file}: {msg}")]
    Schema { file: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("SNR template error: gold heart rate {0} BPM outside [30, 240]")]
    Template(f64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(file: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            msg: msg.into(),
        }
    }
}
