use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({row}, {col}) is outside the {rows}x{cols} grid")]
    OutOfBounds {
        row: i64,
        col: i64,
        rows: usize,
        cols: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),

    #[error("tensor file format error in `{field}`: {message}")]
    Format { field: &'static str, message: String },

    #[error("unsupported dtype `{0}` (only little-endian f4 is supported)")]
    UnsupportedDtype(String),

    #[error("payload holds {actual} values but the header shape needs {expected}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("unknown cell type {0}")]
    UnknownCellType(u32),

    #[error("decode failed at ({x}, {y}): {reason}")]
    DecodeFailed { x: u32, y: u32, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
