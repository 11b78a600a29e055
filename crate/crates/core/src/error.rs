use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logit in batch item {batch}, channel {channel}")]
    NonFinite { batch: usize, channel: usize },

    #[error("heatmap channel {channel} of batch item {batch} sums to {sum}; soft-argmax needs normalized maps")]
    DegenerateHeatmap {
        batch: usize,
        channel: usize,
        sum: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training fault: {component} is {value}")]
    TrainingFault { component: String, value: f64 },

    #[error("cannot ingest {path}: {message}. {hint}")]
    Ingestion {
        path: PathBuf,
        message: String,
        hint: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric `{metric}` unavailable: {reason}")]
    MetricUnavailable { metric: String, reason: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
