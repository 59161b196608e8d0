use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("annotations reference unknown image ids: {0:?}")]
    UnknownImages(Vec<u64>),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("geometry outside image bounds ({clipped} pixel(s) clipped)")]
    OutOfBounds { clipped: u64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("unknown part id {0}")]
    UnknownPart(u64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backend capability: {0}")]
    Capability(String),

    #[error("backend connection: {0}")]
    Connection(String),

    #[error("backend failed on image {image_id}: {source}")]
    Backend {
        image_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("{0}")]
    MissingAugmentation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than by the runtime
    /// environment. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::UnknownImages(_)
            | Error::Validation(_)
            | Error::OutOfBounds { .. }
            | Error::DimMismatch(_)
            | Error::UnknownPart(_)
            | Error::InvalidArgument(_) => true,
            Error::Backend { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
