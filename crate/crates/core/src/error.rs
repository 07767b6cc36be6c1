use std::path::PathBuf;

/// Errors produced anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{axis} dimension {size} is not divisible by {divisor}")]
    Dimension {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("data error: {0}")]
    Data(String),

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

    #[error("checkpoint format version {found} is incompatible with supported version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than a runtime fault.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::Image { .. }
                | Error::Dimension { .. }
                | Error::Io { .. }
                | Error::CheckpointVersion { .. }
                | Error::CheckpointCorrupt(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
