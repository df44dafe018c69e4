use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("weight file {path}: {reason} at byte offset {offset}")]
    WeightLoad {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("synthesis diverged at step {step} (loss trace has {} entries)", trace.len())]
    Synthesis { step: usize, trace: Vec<f64> },

    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize, curve: Vec<f64> },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("triplet {id}: {source}")]
    Triplet {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
