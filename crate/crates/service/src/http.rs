//! JSON-over-HTTP routes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cen_core::annotation::{ClusteringRecord, FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::{FieldError, ServiceError};
use crate::service::Service;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub version: u32,
    pub token: String,
}

#[derive(Debug, Deserialize)]
pub struct WorkerQuery {
    pub worker: usize,
}

#[derive(Serialize)]
struct ErrorBody {
    version: u32,
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fields: Vec<FieldError>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Storage(_) | ServiceError::Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        let fields = match &self {
            ServiceError::Invalid(f) => f.clone(),
            _ => Vec::new(),
        };
        let body = ErrorBody {
            version: FORMAT_VERSION,
            error: self.to_string(),
            fields,
        };
        (status, Json(body)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(vec![FieldError::new("body", e.to_string())]))
}

async fn session(State(s): State<Arc<Service>>, body: Bytes) -> Result<impl IntoResponse, ServiceError> {
    let req: SessionRequest = parse_body(&body)?;
    if req.version != FORMAT_VERSION {
        return Err(ServiceError::Invalid(vec![FieldError::new(
            "version",
            format!("unsupported version {}", req.version),
        )]));
    }
    Ok(Json(s.create_session(&req.token)?))
}

async fn next_grid(State(s): State<Arc<Service>>, Query(q): Query<WorkerQuery>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(s.next_grid(q.worker)?))
}

async fn clustering(State(s): State<Arc<Service>>, body: Bytes) -> Result<impl IntoResponse, ServiceError> {
    let rec: ClusteringRecord = parse_body(&body)?;
    Ok(Json(s.submit(rec)?))
}

async fn progress(State(s): State<Arc<Service>>, Query(q): Query<WorkerQuery>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(s.progress(q.worker)?))
}

async fn export(State(s): State<Arc<Service>>) -> Result<impl IntoResponse, ServiceError> {
    let bytes = s.export_bytes()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/session", post(session))
        .route("/grid/next", get(next_grid))
        .route("/clustering", post(clustering))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .with_state(service)
}
