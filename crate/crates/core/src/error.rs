use std::path::PathBuf;

use thiserror::Error;

use crate::camera::Convention;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),

    #[error("quaternion norm {0} is not unit")]
    NonUnitQuaternion(f64),

    #[error("pose conventions do not chain: {0:?} * {1:?}")]
    ConventionMismatch(Convention, Convention),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("camera at {0:?} lies inside primitive {1}")]
    CameraInsidePrimitive([f64; 3], usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by input data rather than program state.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidParameter { .. } | Error::ConventionMismatch(..))
    }
}
