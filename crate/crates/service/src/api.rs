//! HTTP API. Handlers hand work to blocking threads; the engine itself is
//! synchronous.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use feedloop_core::goldset::Split;
use feedloop_core::ingest::FeedQuery;
use feedloop_core::lifecycle::VersionPayload;
use feedloop_core::{Label, Timestamp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{
    parse_gold_rows, Engine, ExperimentRequest, FeedbackInput, ImplicitInput, PromoteRequest, PromptChange,
    RatingTaskRequest, RolloutRequest, TrainRequest,
};
use crate::error::ServiceError;

const MAX_BODY: usize = 512 * 1024 * 1024;

/// Shared handler state. The engine slot is filled once replay finishes;
/// until then only `/health` answers 200.
#[derive(Clone)]
pub struct ApiState {
    engine: Arc<OnceLock<Arc<Engine>>>,
    token: Option<Arc<str>>,
}

impl ApiState {
    pub fn pending(token: Option<String>) -> Self {
        ApiState { engine: Arc::new(OnceLock::new()), token: token.map(Into::into) }
    }

    pub fn ready(engine: Arc<Engine>) -> Self {
        let token = engine.config().server.bearer_token.clone();
        let state = Self::pending(token);
        state.set_engine(engine);
        state
    }

    pub fn set_engine(&self, engine: Arc<Engine>) {
        let _ = self.engine.set(engine);
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine.get().cloned().ok_or(ApiError::NotReady)
    }
}

pub enum ApiError {
    Service(ServiceError),
    NotReady,
    Unauthorized,
    Internal(String),
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::Service(e)
    }
}

pub fn status_of(e: &ServiceError) -> StatusCode {
    match e.code().as_str() {
        "UnknownMessage" | "UnknownConflict" | "UnknownVersion" | "UnknownSnapshot" => StatusCode::NOT_FOUND,
        "ImplicitTrackingDisabled" => StatusCode::FORBIDDEN,
        "ConflictOpen" | "AlreadyResolved" | "Withdrawn" | "DuplicateConflict" | "NotConflicting"
        | "InvalidTransition" | "TestAlreadyRead" | "StaleGate" | "RolloutActive" | "NoRollout"
        | "RetrainInFlight" | "DuplicateVersion" | "NotClassified" | "NoSnapshot" | "NoReference"
        | "SnapshotMismatch" | "ReportMismatch" => StatusCode::CONFLICT,
        "StorageFailure" | "Corrupt" | "GapDetected" | "UnsupportedSchema" | "SchemaViolation" => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        "ClientFailure" => StatusCode::BAD_GATEWAY,
        "ClientRequired" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = match self {
            ApiError::Service(e) => (status_of(&e), e.code(), e.to_string()),
            ApiError::NotReady => (StatusCode::SERVICE_UNAVAILABLE, "NotReady".into(), "replaying the event log".into()),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "Unauthorized".into(), "missing or wrong bearer token".into()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "Internal".into(), m),
        };
        (status, Json(json!({ "error": code, "message": message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// JSON body that may be left empty.
fn optional_json<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("bad JSON body: {e}")).into())
}

/// Runs `f` on a blocking thread and serializes its result.
async fn blocking<T, F>(state: &ApiState, f: F) -> ApiResult
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ServiceError> + Send + 'static,
{
    let engine = state.engine()?;
    let out = tokio::task::spawn_blocking(move || f(&engine)).await.map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(out?).into_response())
}

async fn auth(State(state): State<ApiState>, req: Request, next: Next) -> Response {
    let open = matches!(req.uri().path(), "/health" | "/ready");
    if let (Some(token), false) = (&state.token, open) {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/ready", get(ready))
        .route("/feed", get(feed))
        .route("/ingest", post(ingest))
        .route("/feedback", post(feedback))
        .route("/events/implicit", post(implicit))
        .route("/conflicts", get(conflicts))
        .route("/conflicts/{id}/resolve", post(resolve))
        .route("/review-queue", get(review_queue))
        .route("/rating-task", post(rating_task))
        .route("/metrics", get(metrics))
        .route("/admin/versions", get(versions).post(register_version))
        .route("/admin/versions/{id}", get(version))
        .route("/admin/versions/{id}/evaluate", post(evaluate))
        .route("/admin/versions/{id}/promote", post(promote))
        .route("/admin/versions/{id}/retire", post(retire))
        .route("/admin/train", post(train))
        .route("/admin/rollout", get(rollout).post(start_rollout).patch(update_rollout))
        .route("/admin/rollout/end", post(end_rollout))
        .route("/admin/prompts", post(prompt_change))
        .route("/admin/snapshot", post(snapshot))
        .route("/admin/snapshots/{id}/export", get(export))
        .route("/admin/import-gold", post(import_gold))
        .route("/admin/drift-check", post(drift_check))
        .route("/admin/experiment", post(experiment))
        .route("/admin/digest", get(digest))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn ready(State(state): State<ApiState>) -> ApiResult {
    let engine = state.engine()?;
    Ok(Json(json!({ "ready": true, "last_seq": engine.last_seq() })).into_response())
}

fn parse_time(s: &str) -> Result<Timestamp, ServiceError> {
    s.parse::<i64>()
        .map(Timestamp)
        .ok()
        .or_else(|| Timestamp::parse(s))
        .ok_or_else(|| ServiceError::BadRequest(format!("bad timestamp {s:?}")))
}

#[derive(Deserialize)]
struct FeedParams {
    q: Option<String>,
    /// Comma-separated channel ids.
    channels: Option<String>,
    from: Option<String>,
    to: Option<String>,
    page: Option<u32>,
    page_size: Option<u32>,
    user: Option<String>,
}

async fn feed(State(state): State<ApiState>, Query(p): Query<FeedParams>) -> ApiResult {
    blocking(&state, move |engine| {
        let query = FeedQuery {
            text_query: p.q.filter(|q| !q.is_empty()),
            channel_filter: p.channels.map(|c| c.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect::<BTreeSet<_>>()),
            from: p.from.as_deref().map(parse_time).transpose()?,
            to: p.to.as_deref().map(parse_time).transpose()?,
            page: p.page.unwrap_or(0),
            page_size: p.page_size.unwrap_or(50),
        };
        engine.feed(&query, p.user.as_deref())
    })
    .await
}

#[derive(Deserialize)]
struct IngestParams {
    channel: String,
}

async fn ingest(State(state): State<ApiState>, Query(p): Query<IngestParams>, body: Bytes) -> ApiResult {
    blocking(&state, move |engine| engine.ingest_export(&p.channel, &body)).await
}

async fn feedback(State(state): State<ApiState>, Json(input): Json<FeedbackInput>) -> ApiResult {
    blocking(&state, move |engine| engine.record_feedback(&input)).await
}

async fn implicit(State(state): State<ApiState>, Json(inputs): Json<Vec<ImplicitInput>>) -> ApiResult {
    blocking(&state, move |engine| engine.record_implicit(&inputs)).await
}

#[derive(Deserialize)]
struct ConflictParams {
    status: Option<String>,
}

async fn conflicts(State(state): State<ApiState>, Query(p): Query<ConflictParams>) -> ApiResult {
    blocking(&state, move |engine| {
        let open_only = match p.status.as_deref() {
            None | Some("open") => true,
            Some("all") => false,
            Some(other) => return Err(ServiceError::BadRequest(format!("status must be open or all, got {other}"))),
        };
        Ok(engine.conflicts(open_only))
    })
    .await
}

#[derive(Deserialize)]
struct ResolveBody {
    label: Label,
    resolver_id: String,
}

async fn resolve(State(state): State<ApiState>, Path(id): Path<u64>, Json(body): Json<ResolveBody>) -> ApiResult {
    blocking(&state, move |engine| engine.resolve_conflict(id, body.label, &body.resolver_id)).await
}

#[derive(Deserialize)]
struct LimitParams {
    limit: Option<usize>,
}

async fn review_queue(State(state): State<ApiState>, Query(p): Query<LimitParams>) -> ApiResult {
    blocking(&state, move |engine| Ok(engine.review_queue(p.limit.unwrap_or(100)))).await
}

#[derive(Deserialize)]
struct RatingBody {
    #[serde(flatten)]
    request: RatingTaskRequest,
    user: Option<String>,
}

async fn rating_task(State(state): State<ApiState>, Json(body): Json<RatingBody>) -> ApiResult {
    blocking(&state, move |engine| engine.rating_task(&body.request, body.user.as_deref())).await
}

async fn metrics(State(state): State<ApiState>) -> ApiResult {
    blocking(&state, |engine| Ok(engine.metrics())).await
}

async fn versions(State(state): State<ApiState>) -> ApiResult {
    blocking(&state, |engine| Ok(engine.versions())).await
}

async fn version(State(state): State<ApiState>, Path(id): Path<String>) -> ApiResult {
    blocking(&state, move |engine| engine.version(&id)).await
}

#[derive(Deserialize)]
struct RegisterBody {
    payload: VersionPayload,
    snapshot_id: String,
    actor: String,
    rationale: String,
}

async fn register_version(State(state): State<ApiState>, Json(b): Json<RegisterBody>) -> ApiResult {
    blocking(&state, move |engine| {
        let id = engine.register_version(b.payload, &b.snapshot_id, &b.actor, &b.rationale)?;
        Ok(json!({ "version_id": id }))
    })
    .await
}

#[derive(Default, Deserialize)]
struct EvaluateBody {
    snapshot_id: Option<String>,
    split: Option<Split>,
}

async fn evaluate(State(state): State<ApiState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: EvaluateBody = optional_json(&body)?;
    blocking(&state, move |engine| engine.evaluate(&id, b.snapshot_id.as_deref(), b.split.unwrap_or(Split::Validation)))
        .await
}

async fn promote(State(state): State<ApiState>, Path(id): Path<String>, Json(req): Json<PromoteRequest>) -> ApiResult {
    blocking(&state, move |engine| engine.promote(&id, &req)).await
}

#[derive(Deserialize)]
struct ActorBody {
    actor: String,
    rationale: String,
}

async fn retire(State(state): State<ApiState>, Path(id): Path<String>, Json(b): Json<ActorBody>) -> ApiResult {
    blocking(&state, move |engine| engine.retire(&id, &b.actor, &b.rationale)).await
}

async fn train(State(state): State<ApiState>, body: Bytes) -> ApiResult {
    let req: TrainRequest = optional_json(&body)?;
    blocking(&state, move |engine| engine.train(&req)).await
}

async fn rollout(State(state): State<ApiState>) -> ApiResult {
    blocking(&state, |engine| Ok(engine.rollout())).await
}

async fn start_rollout(State(state): State<ApiState>, Json(req): Json<RolloutRequest>) -> ApiResult {
    blocking(&state, move |engine| engine.start_rollout(&req)).await
}

#[derive(Deserialize)]
struct UpdateRolloutBody {
    fraction_b: f64,
    actor: String,
}

async fn update_rollout(State(state): State<ApiState>, Json(b): Json<UpdateRolloutBody>) -> ApiResult {
    blocking(&state, move |engine| engine.update_rollout(b.fraction_b, &b.actor)).await
}

async fn end_rollout(State(state): State<ApiState>, Json(b): Json<ActorBody>) -> ApiResult {
    blocking(&state, move |engine| engine.end_rollout(&b.actor, &b.rationale)).await
}

async fn prompt_change(State(state): State<ApiState>, Json(change): Json<PromptChange>) -> ApiResult {
    blocking(&state, move |engine| engine.apply_prompt_change(&change)).await
}

async fn snapshot(State(state): State<ApiState>) -> ApiResult {
    blocking(&state, |engine| engine.snapshot()).await
}

#[derive(Deserialize)]
struct ExportParams {
    split: Option<Split>,
}

async fn export(State(state): State<ApiState>, Path(id): Path<String>, Query(p): Query<ExportParams>) -> ApiResult {
    let engine = state.engine()?;
    let bytes = tokio::task::spawn_blocking(move || {
        let mut out = Vec::new();
        engine.export(&id, p.split, &mut out).map(|_| out)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(bytes)).into_response())
}

async fn import_gold(State(state): State<ApiState>, body: String) -> ApiResult {
    blocking(&state, move |engine| {
        let added = engine.import_gold(&parse_gold_rows(&body)?)?;
        Ok(json!({ "added": added }))
    })
    .await
}

async fn drift_check(State(state): State<ApiState>) -> ApiResult {
    blocking(&state, |engine| engine.drift_check()).await
}

async fn experiment(State(state): State<ApiState>, Json(req): Json<ExperimentRequest>) -> ApiResult {
    let engine = state.engine()?;
    let report = tokio::task::spawn_blocking(move || engine.experiment(&req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "application/json")], report.to_json()).into_response())
}

async fn digest(State(state): State<ApiState>) -> ApiResult {
    blocking(&state, |engine| Ok(json!({ "digest": engine.digest(), "last_seq": engine.last_seq() }))).await
}
