use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::model::*;
use crate::service::{AnnotationService, ServiceError};

pub type AppState = Arc<AnnotationService>;

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                offending_ids: Vec::new(),
            },
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::NotReady(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Core(zscir_core::Error::Lookup(_)) => StatusCode::NOT_FOUND,
            ServiceError::Core(_) | ServiceError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        let offending_ids = match &e {
            ServiceError::Validation { offending_ids, .. } => offending_ids.clone(),
            _ => Vec::new(),
        };
        Self {
            status,
            body: ErrorBody {
                error: e.to_string(),
                offending_ids,
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs a workflow call off the async executor; searches are CPU bound.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AnnotationService) -> Result<T, ServiceError> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Deserialize)]
struct SessionParams {
    session_id: Option<String>,
}

#[derive(Deserialize)]
struct ReferenceParams {
    session_id: String,
    #[serde(default)]
    skip: bool,
}

#[derive(Deserialize)]
struct CandidateParams {
    session_id: String,
}

#[derive(Deserialize)]
struct ExportParams {
    ratio: Option<f64>,
    seed: Option<u64>,
}

async fn session(State(s): State<AppState>, q: Result<Query<SessionParams>, QueryRejection>) -> ApiResult<SessionView> {
    let Query(q) = q?;
    Ok(Json(match q.session_id {
        Some(id) => s.session(&id)?,
        None => s.create_session(),
    }))
}

async fn reference(
    State(s): State<AppState>,
    q: Result<Query<ReferenceParams>, QueryRejection>,
) -> ApiResult<ReferenceView> {
    let Query(q) = q?;
    Ok(Json(blocking(&s, move |s| s.reference(&q.session_id, q.skip)).await?))
}

async fn candidates(
    State(s): State<AppState>,
    Path(reference_id): Path<String>,
    q: Result<Query<CandidateParams>, QueryRejection>,
) -> ApiResult<CandidateGallery> {
    let Query(q) = q?;
    Ok(Json(blocking(&s, move |s| s.candidates(&q.session_id, &reference_id)).await?))
}

async fn triplet(
    State(s): State<AppState>,
    body: Result<Json<TripletRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<TripletCreated>), ApiError> {
    let Json(req) = body?;
    let created = blocking(&s, move |s| s.submit_triplet(&req)).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn gt_candidates(State(s): State<AppState>, Path(triplet_id): Path<String>) -> ApiResult<GtGallery> {
    Ok(Json(blocking(&s, move |s| s.gt_candidates(&triplet_id)).await?))
}

async fn ground_truths(
    State(s): State<AppState>,
    body: Result<Json<GroundTruthRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<StoredQuery>), ApiError> {
    let Json(req) = body?;
    let stored = blocking(&s, move |s| s.submit_ground_truths(&req)).await?;
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn export(State(s): State<AppState>, q: Result<Query<ExportParams>, QueryRejection>) -> Result<Response, ApiError> {
    let Query(q) = q?;
    let bytes = blocking(&s, move |s| {
        let dataset = s.export(q.ratio, q.seed)?;
        Ok(dataset.to_canonical_json()?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn image(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = s.image_file(&id)?.to_path_buf();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(s.health())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", get(session))
        .route("/reference", get(reference))
        .route("/candidates/{reference_id}", get(candidates))
        .route("/triplet", post(triplet))
        .route("/gt-candidates/{triplet_id}", get(gt_candidates))
        .route("/ground-truths", post(ground_truths))
        .route("/export", get(export))
        .route("/images/{id}", get(image))
        .route("/health", get(health))
        .with_state(state)
}
