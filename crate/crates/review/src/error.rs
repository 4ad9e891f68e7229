use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("{0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("missing or invalid operator token")]
    Unauthorized,
    #[error("corrupt session log: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] inout_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl ReviewError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        ReviewError::Io { context: context.into(), source }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ReviewError::Validation(_) => StatusCode::BAD_REQUEST,
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::Conflict(_) => StatusCode::CONFLICT,
            ReviewError::Unauthorized => StatusCode::UNAUTHORIZED,
            ReviewError::Core(inout_core::Error::Validation(_)) => StatusCode::BAD_REQUEST,
            ReviewError::Corrupt(_) | ReviewError::Core(_) | ReviewError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self.status() {
            StatusCode::BAD_REQUEST => "validation",
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            StatusCode::UNAUTHORIZED => "unauthorized",
            _ => "internal",
        }
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        let body = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
