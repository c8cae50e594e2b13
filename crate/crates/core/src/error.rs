use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (camera-frame z = {z:.3e})")]
    BehindCamera { z: f64 },

    #[error("invalid encoding range: d1 = {d1} must be below d2 = {d2}")]
    InvalidRange { d1: usize, d2: usize },

    #[error("point {0:?} lies outside the field bounding box")]
    OutOfBounds([f64; 3]),

    #[error("augmentation `{kind}` does not apply to the {family} field family")]
    IncompatibleKind { kind: String, family: String },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("depth {depth} outside the MPI range [{z_min}, {z_max}]")]
    DepthOutOfRange { depth: f64, z_min: f64, z_max: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
