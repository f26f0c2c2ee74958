//! HTTP API.
//!
//! Every route except `GET /healthz` needs `Authorization: Bearer <token>`.
//! The optional `X-Actor` header names the caller in the audit log.
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | GET | `/healthz` | | `{"status": "ok", "model_loaded": true}` |
//! | GET | `/patients` | | `[PatientRecord]` |
//! | POST | `/patients` | `NewPatient` | `201 PatientRecord` |
//! | GET | `/patients/{id}` | | `StoreRecord` |
//! | POST | `/patients/{id}/scans` | multipart | `201 IngestOutcome` |
//! | POST | `/patients/{id}/medications` | `MedicationEvent` | `201 PatientRecord` |
//! | GET | `/patients/{id}/timeline?forecast=true&horizon=3` | | `TimelineView` |
//! | GET | `/triage` | | `[TriageEntry]` |
//!
//! A scan upload carries a `manifest` text part in the manifest CSV format
//! holding the rows of exactly one scan, plus one file part per slice whose
//! field name is that row's `image_path`.
//!
//! Errors are `{"error": kind, "message": text}`, with `"stage"` added when
//! a pipeline stage failed.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ctdx_core::manifest::{parse_manifest, MemorySource};
use ctdx_core::pipeline::Stage;
use ctdx_core::MedicationEvent;
use serde::Deserialize;
use serde_json::json;

use crate::service::{EhrService, NewPatient, ServiceError};

pub const MAX_UPLOAD_BYTES: usize = 64 << 20;
const DEFAULT_ACTOR: &str = "api";

#[derive(Clone)]
struct AppState {
    service: Arc<EhrService>,
    token: Arc<str>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    stage: Option<Stage>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
            stage: None,
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let (status, kind) = match &e {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::NonMonotone { .. } => (StatusCode::CONFLICT, "non_monotone_timeline"),
            ServiceError::Pipeline { stage: Some(Stage::Validation), .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "pipeline")
            }
            ServiceError::Pipeline { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "pipeline"),
            ServiceError::NoModel => (StatusCode::SERVICE_UNAVAILABLE, "no_model"),
            ServiceError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self {
            status,
            kind,
            stage: e.stage(),
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::validation(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.kind, "message": self.message});
        if let Some(stage) = self.stage {
            body["stage"] = json!(stage.as_str());
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Builds the router. `token` is the bearer token every protected route
/// requires.
pub fn router(service: Arc<EhrService>, token: &str) -> Router {
    let state = AppState {
        service,
        token: token.into(),
    };
    let protected = Router::new()
        .route("/patients", get(list_patients).post(register_patient))
        .route("/patients/{id}", get(get_patient))
        .route("/patients/{id}/scans", post(ingest_scan))
        .route("/patients/{id}/medications", post(add_medication))
        .route("/patients/{id}/timeline", get(timeline))
        .route("/triage", get(triage))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(protected)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(&*state.token) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response()
    }
}

fn actor(headers: &HeaderMap) -> String {
    headers
        .get("x-actor")
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.trim().is_empty())
        .unwrap_or(DEFAULT_ACTOR)
        .to_string()
}

/// Runs blocking service work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn healthz(State(state): State<AppState>) -> impl IntoResponse {
    Json(json!({"status": "ok", "model_loaded": state.service.has_model()}))
}

async fn list_patients(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.service.list_patients())
}

async fn register_patient(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<NewPatient>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let who = actor(&headers);
    let svc = state.service.clone();
    let rec = blocking(move || svc.register_patient(req, &who)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn get_patient(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json((*state.service.get_patient(&id)?).clone()))
}

async fn ingest_scan(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    mut form: Multipart,
) -> ApiResult<impl IntoResponse> {
    let mut manifest = None;
    let mut files = HashMap::new();
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::validation(e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::validation(e.body_text()))?;
        if name == "manifest" {
            manifest = Some(
                String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::validation("manifest is not UTF-8"))?,
            );
        } else {
            files.insert(name, bytes.to_vec());
        }
    }
    let manifest = manifest.ok_or_else(|| ApiError::validation("missing manifest part"))?;
    let who = actor(&headers);
    let svc = state.service.clone();
    let outcome = blocking(move || {
        let mut scans = parse_manifest(&manifest, &MemorySource(files))
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        if scans.len() != 1 {
            return Err(ServiceError::Validation(format!(
                "upload must hold exactly one scan, found {}",
                scans.len()
            )));
        }
        let scan = scans.pop().expect("one scan");
        svc.ingest_and_diagnose(&id, &scan, &who)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(outcome)))
}

async fn add_medication(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<MedicationEvent>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(event) = body?;
    let who = actor(&headers);
    let svc = state.service.clone();
    let rec = blocking(move || svc.add_medication(&id, event, &who)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

#[derive(Debug, Deserialize)]
struct TimelineQuery {
    #[serde(default)]
    forecast: bool,
    #[serde(default = "default_horizon")]
    horizon: u32,
}

fn default_horizon() -> u32 {
    3
}

async fn timeline(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<TimelineQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query.map_err(|e| ApiError::validation(e.body_text()))?;
    let horizon = q.forecast.then_some(q.horizon);
    Ok(Json(state.service.get_timeline(&id, horizon)?))
}

async fn triage(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.service.triage_queue())
}
