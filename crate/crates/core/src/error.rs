use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("synthetic generation failed for seed {seed}, sample {index}: {reason}")]
    Generation {
        seed: u64,
        index: usize,
        reason: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no attendable tokens in sequence")]
    NoAttendableTokens,

    #[error("sample `{0}` has no row in the prompt bank")]
    MissingBankRow(String),

    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),

    #[error("training diverged in {stage} (epoch {epoch}, step {step}): loss = {loss}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
