use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("input of {rows}x{cols} is not divisible by {divisor} (2^depth); pad or tile the input")]
    Divisibility {
        rows: usize,
        cols: usize,
        divisor: usize,
    },

    #[error("no DICOM slices found in {0}")]
    NoSlices(PathBuf),

    #[error("{path}: {message}")]
    Dicom { path: PathBuf, message: String },

    #[error("non-finite loss at step {step} (mask seed {mask_seed})")]
    NonFiniteLoss { step: usize, mask_seed: u64 },

    #[error("denoiser has not been trained")]
    Untrained,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{0}")]
    Invalid(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
