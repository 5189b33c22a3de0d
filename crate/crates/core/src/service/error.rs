use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use crate::error::EditError;

/// Error body: a machine-readable `code` and a human `message`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn stats_missing() -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "stats_missing",
            "no channel statistics for the active backend; run POST /directions/precompute first",
        )
    }
}

impl From<EditError> for ApiError {
    fn from(e: EditError) -> Self {
        let (status, code) = match &e {
            EditError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            EditError::DegeneratePrompt(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "degenerate_prompt")
            }
            EditError::IdentityUnavailable => (StatusCode::CONFLICT, "identity_unavailable"),
            EditError::InvalidGeometry(_) => (StatusCode::CONFLICT, "geometry_mismatch"),
            EditError::InverterUnavailable => {
                (StatusCode::SERVICE_UNAVAILABLE, "inverter_unavailable")
            }
            EditError::BackendUnavailable(_) => {
                (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable")
            }
            EditError::Image(_) => (StatusCode::BAD_REQUEST, "malformed_image"),
            EditError::InvalidArgument(_)
            | EditError::ShapeMismatch { .. }
            | EditError::NonFinite(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            EditError::Diverged { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "diverged"),
            EditError::Format(_)
            | EditError::Integrity(_)
            | EditError::Io(_)
            | EditError::Json(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
