use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use sf_lens_core::csf::CsfError;
use sf_lens_core::latent::LatentError;
use sf_lens_core::metrics::MetricsError;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    UnknownEntity(String),
    #[error("{0}")]
    BadParameter(String),
    #[error("{0}")]
    EmbeddingNotReady(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownEntity(_) => StatusCode::NOT_FOUND,
            ApiError::BadParameter(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::EmbeddingNotReady(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::UnknownEntity(_) => "UnknownEntity",
            ApiError::BadParameter(_) => "BadParameter",
            ApiError::EmbeddingNotReady(_) => "EmbeddingNotReady",
            ApiError::Internal(_) => "Internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.kind(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

impl From<CsfError> for ApiError {
    fn from(e: CsfError) -> Self {
        match e {
            CsfError::UnknownChannel(_) | CsfError::MissingTensor { .. } => ApiError::UnknownEntity(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<MetricsError> for ApiError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::UnknownStudy(_) => ApiError::UnknownEntity(e.to_string()),
            MetricsError::EmptyStudy(_) | MetricsError::DegenerateStudy => ApiError::BadParameter(e.to_string()),
            MetricsError::Csf(c) => c.into(),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<LatentError> for ApiError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::UnknownRecord(_) | LatentError::MissingVariant(_) | LatentError::EmptyScope(_) => {
                ApiError::UnknownEntity(e.to_string())
            }
            LatentError::TooFewPoints { .. } | LatentError::PerplexityTooLarge { .. } | LatentError::DegenerateData => {
                ApiError::BadParameter(e.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}
