use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pcal_core::Error as CoreError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Core(e) => match e {
                CoreError::Busy | CoreError::Phase { .. } => StatusCode::CONFLICT,
                CoreError::InvalidParameter(_)
                | CoreError::Parse { .. }
                | CoreError::Format(_)
                | CoreError::Config { .. }
                | CoreError::Json(_) => StatusCode::BAD_REQUEST,
                CoreError::NotConverged(_) | CoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ApiError::NotFound(_) => "not_found",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Core(CoreError::Busy) => "busy",
            ApiError::Core(CoreError::Phase { .. }) => "phase",
            ApiError::Core(_) => "invalid",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.kind(), "message": self.to_string() }));
        (self.status(), body).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
