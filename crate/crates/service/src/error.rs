use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use alarm_core::dataio::DataError;
use alarm_core::explain::ExplainError;
use alarm_core::insight::InsightError;
use alarm_core::rules::RuleError;
use alarm_core::xstream::DetectorError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("validation failed")]
    Invalid(Vec<FieldError>),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn field(field: impl Into<String>, message: impl ToString) -> Self {
        ApiError::Invalid(vec![FieldError {
            field: field.into(),
            message: message.to_string(),
        }])
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound { .. } => StatusCode::NOT_FOUND,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.to_string(),
            fields: match self {
                ApiError::Invalid(f) => f.clone(),
                _ => Vec::new(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if matches!(self, ApiError::Internal(_)) {
            log::error!("{self}");
        }
        (self.status(), Json(self.body())).into_response()
    }
}

impl From<RuleError> for ApiError {
    fn from(e: RuleError) -> Self {
        match &e {
            RuleError::UnknownFeature(f)
            | RuleError::KindMismatch(f)
            | RuleError::BadInterval(f)
            | RuleError::DuplicateFeature(f) => ApiError::field(format!("rule.{f}"), &e),
            RuleError::UnknownCategory { feature, .. } => {
                ApiError::field(format!("rule.{feature}"), &e)
            }
            RuleError::EmptyRule => ApiError::field("rule.predicates", &e),
            RuleError::EmptyAnomalyGroup => ApiError::field("cluster_id", &e),
            RuleError::BadThreshold(name) => ApiError::field(*name, &e),
            RuleError::Io { .. } | RuleError::Corrupt { .. } => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<InsightError> for ApiError {
    fn from(e: InsightError) -> Self {
        match &e {
            InsightError::ClusterCount { .. } => ApiError::field("clusters", &e),
            InsightError::ZeroBudget => ApiError::field("budget", &e),
            InsightError::TooFewRealFeatures(_)
            | InsightError::NoInliers
            | InsightError::TooFewPoints { .. } => ApiError::field("run", &e),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<DetectorError> for ApiError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::InvalidParams(m) => ApiError::field("params", m),
            DetectorError::EmptyData => ApiError::field("dataset_id", "dataset has no rows"),
            DetectorError::Data(d) => d.into(),
        }
    }
}

impl From<DataError> for ApiError {
    fn from(e: DataError) -> Self {
        ApiError::field("dataset", e)
    }
}

impl From<ExplainError> for ApiError {
    fn from(e: ExplainError) -> Self {
        ApiError::Internal(e.to_string())
    }
}
