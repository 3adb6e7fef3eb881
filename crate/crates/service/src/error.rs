use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadImage,
    BadMask,
    NoCheckpoint,
    UnknownSession,
    UnknownDirection,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadImage | ErrorCode::BadMask => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::UnknownSession | ErrorCode::UnknownDirection => StatusCode::NOT_FOUND,
            ErrorCode::NoCheckpoint => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(ErrorCode::Internal, e.to_string())
    }
}

impl From<gatefill_core::Error> for ApiError {
    fn from(e: gatefill_core::Error) -> Self {
        use gatefill_core::Error as E;
        let code = match &e {
            E::Image(_) => ErrorCode::BadImage,
            E::Mask(_) => ErrorCode::BadMask,
            E::UnknownDirection(_) => ErrorCode::UnknownDirection,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ApiError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(ErrorBody { error: self })).into_response()
    }
}
