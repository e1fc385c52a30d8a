use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("calibration parse failure: {0}")]
    CalibrationParse(String),

    #[error("unsupported calibration version {found} (expected {expected})")]
    CalibrationVersion { found: u32, expected: u32 },

    #[error("improper rotation, camera {camera}: {reason}")]
    ImproperRotation { camera: usize, reason: String },

    #[error("non-monotone focal polynomial, camera {camera}: r(theta) decreases near {theta_deg} deg")]
    NonMonotoneFocal { camera: usize, theta_deg: f64 },

    #[error("invalid intrinsics, camera {camera}: {reason}")]
    InvalidIntrinsics { camera: usize, reason: String },

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("invalid hypothesis range: {0}")]
    InvalidHypotheses(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("scale mismatch: source is {source_dims:?}, intrinsics expect {expected:?} at scale {scale}")]
    ScaleMismatch {
        source_dims: (usize, usize),
        expected: (usize, usize),
        scale: usize,
    },

    #[error("invalid depth: {0}")]
    InvalidDepth(String),

    #[error("panorama width {0} is not divisible by 4")]
    WidthNotDivisibleBy4(usize),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
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

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
