use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sample {id}: {reason}")]
    SampleLoad { id: String, reason: String },

    #[error("non-finite loss at step {step} (lr {lr:e}): total {total}, per-iteration {per_iteration:?}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        total: f64,
        per_iteration: Vec<f64>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
