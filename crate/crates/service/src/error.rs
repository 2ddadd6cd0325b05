use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

/// Error body: `{code, message, details[]}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub details: Vec<String>,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: &str, details: Vec<String>) -> Self {
        ApiError { status, code: code.into(), message: message.into(), details }
    }

    pub fn unprocessable(code: &str, message: &str, details: Vec<String>) -> Self {
        Self::new(422, code, message, details)
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(404, "not_found", "unknown session", vec![format!("session {id:?} does not exist")])
    }

    pub fn bad_json(e: serde_json::Error) -> Self {
        Self::new(422, "invalid_body", "request body is not valid JSON for this endpoint", vec![e.to_string()])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}
