use std::path::PathBuf;

use crate::rle::SegmentKey;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no feature recorded for segment {0}")]
    MissingFeature(SegmentKey),

    #[error("insufficient labels: {0}")]
    InsufficientLabels(String),

    #[error("unknown image '{0}'")]
    UnknownImage(String),

    #[error("unknown segment {0}")]
    UnknownSegment(SegmentKey),

    #[error("unknown label id {0}")]
    UnknownLabel(u32),

    #[error("malformed {kind} file {path:?}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    PngDecode(#[from] png::DecodingError),

    #[error(transparent)]
    PngEncode(#[from] png::EncodingError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
