use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

use ldgm_core::Error;

/// An error response: `{"error": {"code", "message", "path"?}}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub path: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), path: None }
    }

    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: Some(path.into()),
            ..Self::new(StatusCode::BAD_REQUEST, "schema", message)
        }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "task_mismatch", message)
    }

    pub fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", "no model is loaded")
    }

    pub fn overloaded() -> Self {
        Self::new(StatusCode::TOO_MANY_REQUESTS, "overloaded", "the decode queue is full")
    }

    pub fn timeout() -> Self {
        Self::new(StatusCode::GATEWAY_TIMEOUT, "timeout", "decoding exceeded the request timeout")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// Map a library error raised while handling the part of the body at `path`.
    pub fn from_core(err: Error, path: &str) -> Self {
        match err {
            Error::Parse { path: inner, message } => Self::schema(nest_path(path, &inner), message),
            Error::Validation(m) | Error::Vocabulary(m) => Self::schema(path, m),
            Error::Invariant(m) => Self::internal(m),
            other => Self::mismatch(other.to_string()),
        }
    }

    pub fn body(&self) -> Value {
        let mut inner = json!({"code": self.code, "message": self.message});
        if let Some(p) = &self.path {
            inner["path"] = json!(p);
        }
        json!({ "error": inner })
    }
}

/// Re-root a `$`-relative path under `prefix`.
fn nest_path(prefix: &str, inner: &str) -> String {
    match inner.strip_prefix('$') {
        Some(rest) => format!("{prefix}{rest}"),
        None => format!("{prefix}.{inner}"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}
