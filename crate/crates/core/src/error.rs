use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported yaw {0} degrees")]
    UnsupportedYaw(i32),

    #[error("embedder is not trained; run `superfront pretrain-embedder` first")]
    UntrainedEmbedder,

    #[error("identity {identity} has only {found} qualifying samples, need {needed}")]
    InsufficientSamples {
        identity: u32,
        found: usize,
        needed: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("manifest {path}:{line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
