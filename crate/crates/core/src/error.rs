use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("codec error: {0}")]
    Codec(String),

    #[error("value {value} out of representable range: {bound}")]
    Range { value: f64, bound: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("sampling failed: all {raw} samples fell outside the valid range ({filtered} filtered)")]
    EmptySamples { raw: usize, filtered: usize },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("oracle unavailable: {0}")]
    Oracle(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
