use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Error body returned by every endpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
            },
        }
    }

    pub fn with_field(mut self, field: &str) -> Self {
        self.body.field = Some(field.into());
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_input", message)
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session `{id}`"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// Maps an engine error; `field` names the request part it came from.
    pub fn from_core(e: cop_core::Error, field: Option<&str>) -> Self {
        use cop_core::Error as E;
        let err = match &e {
            E::OutOfBounds { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds", e.to_string()),
            E::DimensionMismatch(_) => Self::new(StatusCode::BAD_REQUEST, "dimension_mismatch", e.to_string()),
            E::Format { .. } | E::UnsupportedDtype(_) | E::PayloadSize { .. } | E::InvalidFeatureMap(_) => {
                Self::new(StatusCode::BAD_REQUEST, "malformed_file", e.to_string())
            }
            E::InvalidArgument(_) | E::UnknownCellType(_) => Self::bad_request(e.to_string()),
            _ => Self::internal(e.to_string()),
        };
        match field {
            Some(f) => err.with_field(f),
            None => err,
        }
    }
}

impl From<cop_core::Error> for ApiError {
    fn from(e: cop_core::Error) -> Self {
        Self::from_core(e, None)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.body.code, self.body.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
