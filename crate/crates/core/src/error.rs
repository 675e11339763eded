use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Rotation angle too close to pi for a unique logarithm.
    #[error("rotation angle {angle} rad is outside the canonical chart")]
    ChartBoundary { angle: f64 },

    #[error("pose alignment is degenerate: {0}")]
    AlignmentDegenerate(String),

    #[error("sampling domain is empty: {0}")]
    EmptyDomain(String),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: u64, loss: f64 },

    #[error("unknown scene preset `{0}`")]
    UnknownPreset(String),

    #[error("camera at {position:?} lies inside primitive {primitive}")]
    CameraInsidePrimitive { primitive: usize, position: [f64; 3] },

    #[error("all pixels are masked out")]
    EmptyMask,

    #[error("image of {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("failed to load `{record}`: {reason}")]
    Load { record: String, reason: String },

    #[error("checkpoint version {found} is incompatible with {expected}")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            record: record.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable tag used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::ChartBoundary { .. } => "chart-boundary",
            Error::AlignmentDegenerate(_) => "alignment-degenerate",
            Error::EmptyDomain(_) => "empty-domain",
            Error::Diverged { .. } => "diverged",
            Error::UnknownPreset(_) => "unknown-preset",
            Error::CameraInsidePrimitive { .. } => "camera-inside-primitive",
            Error::EmptyMask => "empty-mask",
            Error::ImageTooSmall { .. } => "image-too-small",
            Error::Load { .. } => "load",
            Error::IncompatibleVersion { .. } => "incompatible-version",
            Error::Io { .. } => "io",
        }
    }
}
