//! Supervisor HTTP API under `/v1`. Bodies are JSON; the event stream is
//! server-sent events with the record seq as the event id.

use std::convert::Infallible;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use sitefleet_core::coordinator::events::EventRecord;
use sitefleet_core::coordinator::{Command, CommandError, InjectRequest, Reply};
use sitefleet_core::fleet::VehicleId;
use sitefleet_core::geo::EnuPoint;
use sitefleet_core::sitemap::ObstacleId;
use sitefleet_core::tasking::{OperationDoc, OperationId, ValidationError};

use crate::coordinator_service::CoordinatorHandle;

const BATCH_LIMIT_MAX: usize = 10_000;

pub fn router(handle: CoordinatorHandle) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/stats", get(stats))
        .route("/v1/snapshot", get(snapshot))
        .route("/v1/commands", post(command))
        .route("/v1/operations", post(submit_operation))
        .route("/v1/operations/{id}/cancel", post(cancel_operation))
        .route("/v1/obstacles", post(inject_obstacle))
        .route("/v1/obstacles/{id}", delete(clear_obstacle))
        .route("/v1/vehicles/{id}/pause", post(pause_vehicle))
        .route("/v1/vehicles/{id}/resume", post(resume_vehicle))
        .route("/v1/plan", post(plan))
        .route("/v1/events", get(events_sse))
        .route("/v1/events/batch", get(events_batch))
        .with_state(handle)
}

/// Error body. Command errors keep their own `error` tag; transport-level
/// failures use `unavailable`.
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn validation(field: &str, message: impl Into<String>) -> Self {
        let err = CommandError::Validation(ValidationError::new(field, message));
        Self { status: StatusCode::BAD_REQUEST, body: serde_json::to_value(err).expect("serializable") }
    }

    fn unavailable() -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            body: serde_json::json!({ "error": "unavailable", "message": "coordinator loop is not running" }),
        }
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        let status = match e {
            CommandError::Validation(_) => StatusCode::BAD_REQUEST,
            CommandError::NotFound { .. } => StatusCode::NOT_FOUND,
            CommandError::Plan { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self { status, body: serde_json::to_value(e).expect("serializable") }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::validation("body", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

async fn run(handle: &CoordinatorHandle, command: Command) -> Result<Reply, ApiError> {
    handle.command(command).await.map_err(|_| ApiError::unavailable())?.map_err(ApiError::from)
}

/// Accepts `7` or the display form `op-7`.
fn parse_id(raw: &str, prefix: &str, field: &str) -> Result<u64, ApiError> {
    let digits = raw.strip_prefix(prefix).and_then(|r| r.strip_prefix('-')).unwrap_or(raw);
    digits.parse().map_err(|_| ApiError::validation(field, format!("{raw:?} is not a valid id")))
}

fn vehicle(raw: String) -> Result<VehicleId, ApiError> {
    VehicleId::new(raw).map_err(|e| ApiError::validation("vehicle", e.to_string()))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn stats(State(h): State<CoordinatorHandle>) -> Result<Response, ApiError> {
    let stats = h.stats().await.map_err(|_| ApiError::unavailable())?;
    Ok(Json(stats).into_response())
}

async fn snapshot(State(h): State<CoordinatorHandle>) -> Result<Response, ApiError> {
    match run(&h, Command::Snapshot).await? {
        Reply::Snapshot { snapshot } => Ok(Json(snapshot).into_response()),
        other => Ok(Json(other).into_response()),
    }
}

async fn command(State(h): State<CoordinatorHandle>, body: Result<Json<Command>, JsonRejection>) -> Result<Json<Reply>, ApiError> {
    let Json(cmd) = body?;
    Ok(Json(run(&h, cmd).await?))
}

async fn submit_operation(
    State(h): State<CoordinatorHandle>,
    body: Result<Json<OperationDoc>, JsonRejection>,
) -> Result<(StatusCode, Json<Reply>), ApiError> {
    let Json(doc) = body?;
    Ok((StatusCode::CREATED, Json(run(&h, Command::SubmitOperation { doc }).await?)))
}

async fn cancel_operation(State(h): State<CoordinatorHandle>, Path(id): Path<String>) -> Result<Json<Reply>, ApiError> {
    let operation = OperationId(parse_id(&id, "op", "operation")?);
    Ok(Json(run(&h, Command::CancelOperation { operation }).await?))
}

async fn inject_obstacle(
    State(h): State<CoordinatorHandle>,
    body: Result<Json<InjectRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<Reply>), ApiError> {
    let Json(req) = body?;
    Ok((StatusCode::CREATED, Json(run(&h, Command::InjectObstacle(req)).await?)))
}

async fn clear_obstacle(State(h): State<CoordinatorHandle>, Path(id): Path<String>) -> Result<Json<Reply>, ApiError> {
    let obstacle = ObstacleId(parse_id(&id, "obs", "obstacle")?);
    Ok(Json(run(&h, Command::ClearObstacle { obstacle }).await?))
}

async fn pause_vehicle(State(h): State<CoordinatorHandle>, Path(id): Path<String>) -> Result<Json<Reply>, ApiError> {
    Ok(Json(run(&h, Command::PauseVehicle { vehicle: vehicle(id)? }).await?))
}

async fn resume_vehicle(State(h): State<CoordinatorHandle>, Path(id): Path<String>) -> Result<Json<Reply>, ApiError> {
    Ok(Json(run(&h, Command::ResumeVehicle { vehicle: vehicle(id)? }).await?))
}

#[derive(Debug, Deserialize)]
struct PlanBody {
    start: EnuPoint,
    goal: EnuPoint,
}

async fn plan(State(h): State<CoordinatorHandle>, body: Result<Json<PlanBody>, JsonRejection>) -> Result<Json<Reply>, ApiError> {
    let Json(PlanBody { start, goal }) = body?;
    Ok(Json(run(&h, Command::PlanPreview { start, goal }).await?))
}

#[derive(Debug, Default, Deserialize)]
struct EventsQuery {
    from_seq: Option<u64>,
    limit: Option<usize>,
    wait_ms: Option<u64>,
}

/// `from_seq` wins; otherwise `Last-Event-ID` resumes after the last seen
/// record; otherwise the stream starts at the next new event.
fn resume_point(q: &EventsQuery, headers: &HeaderMap) -> Option<u64> {
    q.from_seq.or_else(|| {
        headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse::<u64>().ok()).map(|last| last + 1)
    })
}

async fn start_seq(h: &CoordinatorHandle, q: &EventsQuery, headers: &HeaderMap) -> Result<u64, ApiError> {
    match resume_point(q, headers) {
        Some(s) => Ok(s),
        None => Ok(h.stats().await.map_err(|_| ApiError::unavailable())?.latest_seq + 1),
    }
}

fn sse_event(rec: &EventRecord) -> Event {
    let data = serde_json::to_string(rec).expect("records serialize");
    Event::default().id(rec.seq.to_string()).event(rec.body.kind_name()).data(data)
}

async fn events_sse(
    State(h): State<CoordinatorHandle>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let from = start_seq(&h, &q, &headers).await?;
    let stream = h.events(from).map(|rec| Ok(sse_event(&rec)));
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(10))))
}

#[derive(Debug, Serialize)]
struct EventBatch {
    events: Vec<EventRecord>,
    /// Seq to pass as `from_seq` on the next call.
    next_seq: u64,
}

/// Long-poll variant: returns retained events from `from_seq` (at most
/// `limit`), waiting up to `wait_ms` for the first one when none are ready.
async fn events_batch(
    State(h): State<CoordinatorHandle>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Json<EventBatch>, ApiError> {
    let from = start_seq(&h, &q, &headers).await?;
    let limit = q.limit.unwrap_or(1000).clamp(1, BATCH_LIMIT_MAX);
    let mut sub = h.subscribe(from).await.map_err(|_| ApiError::unavailable())?;
    let mut events: Vec<EventRecord> = sub.backlog.into_iter().take(limit).collect();
    if events.is_empty() {
        let wait = Duration::from_millis(q.wait_ms.unwrap_or(0).min(30_000));
        if let Ok(Ok(rec)) = tokio::time::timeout(wait, sub.live.recv()).await {
            events.push(rec);
            while events.len() < limit {
                match sub.live.try_recv() {
                    Ok(rec) => events.push(rec),
                    Err(_) => break,
                }
            }
        }
    }
    events.retain(|r| r.seq >= from);
    let next_seq = events.last().map_or(from, |r| r.seq + 1);
    Ok(Json(EventBatch { events, next_seq }))
}
