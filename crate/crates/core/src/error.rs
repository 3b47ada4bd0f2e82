use thiserror::Error;

/// Errors raised by the planning engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("calibration diverged: {0}")]
    CalibrationDiverged(String),
    #[error("case {0} has not been calibrated")]
    NotCalibrated(String),
    #[error("{location}: {message}")]
    Ingest { location: String, message: String },
    #[error("value out of bounds at {field}: {message}")]
    OutOfBounds { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn ingest(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Ingest {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
