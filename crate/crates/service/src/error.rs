use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use qms_core::kb::KbError;
use qms_core::retrieval::RetrievalError;
use qms_core::settings::SettingsError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is already running a query")]
    SessionBusy(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown ingest kind {0:?}; expected regulatory, form483, qa, cfr_manifest or alignment_decisions")]
    UnknownKind(String),
    #[error("unknown chunk {0}")]
    UnknownChunk(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Settings(#[from] SettingsError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn name(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "UnknownSession",
            ServiceError::SessionBusy(_) => "SessionBusy",
            ServiceError::EmptyQuery => "EmptyQuery",
            ServiceError::UnknownKind(_) => "UnknownKind",
            ServiceError::UnknownChunk(_) => "UnknownChunk",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Kb(e) => e.kind_name(),
            ServiceError::Settings(_) => "InvalidSettings",
            ServiceError::Retrieval(RetrievalError::BackendUnavailable(_)) => "BackendUnavailable",
            ServiceError::Retrieval(_) => "RetrievalError",
            ServiceError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) | ServiceError::UnknownChunk(_) => StatusCode::NOT_FOUND,
            ServiceError::SessionBusy(_) => StatusCode::CONFLICT,
            ServiceError::EmptyQuery | ServiceError::UnknownKind(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Kb(KbError::Retrieval(_)) | ServiceError::Retrieval(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Kb(e) if e.is_client_error() => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Kb(_) | ServiceError::Settings(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            tracing::error!("{self}");
        }
        (self.status(), Json(json!({ "error": self.name(), "message": self.to_string() }))).into_response()
    }
}
