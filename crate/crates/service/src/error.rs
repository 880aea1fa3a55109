use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use situwatch_core::prediction::PredictionError;
use situwatch_core::similarity::SimilarityError;
use situwatch_core::situation::SituationError;
use situwatch_core::EngineError;

/// Error body shared by every endpoint: a stable `error` code, a human message and,
/// for validation failures, the offending field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error,
                message: message.into(),
                field: None,
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_body", message)
    }

    pub fn unknown_baseline(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "unknown_baseline",
            format!("no baseline `{id}`"),
        )
    }

    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", message);
        e.body.field = Some(field.into());
        e
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<SituationError> for ApiError {
    fn from(e: SituationError) -> Self {
        match e {
            SituationError::InsufficientHistory { .. } => {
                Self::new(StatusCode::CONFLICT, "insufficient_history", e.to_string())
            }
            other => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_request",
                other.to_string(),
            ),
        }
    }
}

impl From<PredictionError> for ApiError {
    fn from(e: PredictionError) -> Self {
        match &e {
            PredictionError::InvalidPolicy { field, .. } => Self::invalid(*field, e.to_string()),
            PredictionError::UnknownBaseline(id) => Self::unknown_baseline(id),
            _ => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_request",
                e.to_string(),
            ),
        }
    }
}

impl From<SimilarityError> for ApiError {
    fn from(e: SimilarityError) -> Self {
        match &e {
            SimilarityError::InvalidConfig { field, .. } => Self::invalid(*field, e.to_string()),
            _ => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_request",
                e.to_string(),
            ),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Situation(e) => e.into(),
            EngineError::Similarity(e) => e.into(),
            EngineError::Prediction(e) => e.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
