use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use latentdose_core::Error;
use serde::{Deserialize, Serialize};

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub envelope: ErrorEnvelope,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<String>) -> Self {
        ApiError { status, envelope: ErrorEnvelope { code: code.into(), message: message.into(), field } }
    }

    pub fn bad_request(message: impl Into<String>, field: Option<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message, field)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} '{id}' does not exist"), None)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message, None)
    }

    pub fn unprocessable(message: impl Into<String>, field: Option<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds", message, field)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, None)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::OutOfBounds { field, message } => ApiError::unprocessable(message, Some(field)),
            Error::Ingest { location, message } => ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_record",
                format!("{location}: {message}"),
                Some(location),
            ),
            Error::Format(m) => ApiError::bad_request(m, None),
            e @ Error::ShapeMismatch { .. } => ApiError::bad_request(e.to_string(), None),
            Error::Io(io) => ApiError::internal(io.to_string()),
            other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", other.to_string(), None),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.envelope)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
