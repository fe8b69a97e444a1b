use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use relayout::pipeline::Finding;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;

use crate::jobs::{JobConfig, JobEvent, JobService, SubmitError, Upload};
use crate::store::JobState;

/// `{code, message, findings[]}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    findings: Vec<Finding>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            findings: Vec::new(),
        }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no job `{id}`"))
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
    findings: &'a [Finding],
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code,
            message: &self.message,
            findings: &self.findings,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        let status = e.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "bad_multipart" };
        ApiError::new(status, code, e.body_text())
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        match e {
            SubmitError::Invalid(findings) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "validation",
                message: "the submission failed validation".into(),
                findings,
            },
            SubmitError::Internal(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(svc: Arc<JobService>) -> Router {
    let limit = svc.config().max_upload_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/jobs", post(submit).get(list))
        .route("/api/jobs/{id}", get(job))
        .route("/api/jobs/{id}/events", get(events))
        .route("/api/jobs/{id}/result", get(result))
        .route("/api/jobs/{id}/manifest", get(manifest))
        .route("/api/jobs/{id}/telemetry", get(telemetry))
        .route("/api/jobs/{id}/previews/{name}", get(preview))
        .route("/api/jobs/{id}/cancel", post(cancel))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(svc)
}

async fn health(State(svc): State<Arc<JobService>>) -> Json<serde_json::Value> {
    let counts = svc.counts();
    let n = |s| counts.get(&s).copied().unwrap_or(0);
    Json(json!({
        "status": "ok",
        "workers": svc.config().workers,
        "queued": n(JobState::Queued),
        "running": svc.running(),
        "done": n(JobState::Done),
        "failed": n(JobState::Failed),
        "cancelled": n(JobState::Cancelled),
    }))
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
}

/// Multipart fields: `image`, `source_layout`, `target_layout`, optional
/// `config` (JSON), and any number of mask files referenced by the layouts.
async fn submit(
    State(svc): State<Arc<JobService>>,
    headers: HeaderMap,
    mut multipart: Multipart,
) -> ApiResult<Response> {
    let key = headers
        .get("idempotency-key")
        .map(|v| v.to_str().map(str::to_string).map_err(|_| bad_request("idempotency key must be ASCII")))
        .transpose()?;
    let mut upload = Upload::default();
    while let Some(field) = multipart.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        let file_name = field.file_name().map(str::to_string);
        let bytes = field.bytes().await?.to_vec();
        match name.as_str() {
            "image" => upload.image = bytes,
            "source_layout" => upload.source_layout = bytes,
            "target_layout" => upload.target_layout = bytes,
            "config" => {
                upload.config = serde_json::from_slice::<JobConfig>(&bytes)
                    .map_err(|e| bad_request(format!("config is not valid JSON: {e}")))?
            }
            _ => {
                let file = file_name.filter(|f| !f.is_empty()).unwrap_or(name);
                upload.files.push((file, bytes));
            }
        }
    }
    let svc2 = Arc::clone(&svc);
    let submitted = tokio::task::spawn_blocking(move || svc2.submit(upload, key))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let status = if submitted.created { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((status, Json(json!({ "id": submitted.id, "state": submitted.state }))).into_response())
}

async fn list(State(svc): State<Arc<JobService>>) -> Response {
    Json(svc.list()).into_response()
}

async fn job(State(svc): State<Arc<JobService>>, Path(id): Path<String>) -> ApiResult<Response> {
    let record = svc.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(record).into_response())
}

#[derive(Deserialize)]
struct EventQuery {
    after: Option<u64>,
}

fn sse_event(e: &JobEvent) -> Event {
    let name = match e.kind {
        crate::jobs::EventKind::State { .. } => "state",
        crate::jobs::EventKind::Step { .. } => "step",
    };
    Event::default()
        .event(name)
        .id(e.seq.to_string())
        .json_data(e)
        .expect("events serialize")
}

/// Server-sent events by default. `?after=N` or `Accept: application/json`
/// returns the events after `N` as a JSON array for polling clients.
async fn events(
    State(svc): State<Arc<JobService>>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let wants_json = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("application/json"));
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());
    if wants_json || q.after.is_some() {
        let list = svc.events(&id, q.after.unwrap_or(0)).ok_or_else(|| ApiError::not_found(&id))?;
        return Ok(Json(list).into_response());
    }
    let (past, live) = svc
        .subscribe(&id, resume.or(q.after).unwrap_or(0))
        .ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Sse::new(event_stream(past, live)).keep_alive(KeepAlive::default()).into_response())
}

fn event_stream(
    past: Vec<JobEvent>,
    live: Option<broadcast::Receiver<JobEvent>>,
) -> impl Stream<Item = Result<Event, Infallible>> {
    let last = past.last().map_or(0, |e| e.seq);
    let finished = past.last().is_some_and(JobEvent::is_terminal);
    let live = match live.filter(|_| !finished) {
        None => stream::empty().boxed(),
        Some(rx) => stream::unfold((rx, last, false), |(mut rx, last, done)| async move {
            if done {
                return None;
            }
            loop {
                match rx.recv().await {
                    Ok(e) if e.seq <= last => continue,
                    Ok(e) => {
                        let done = e.is_terminal();
                        return Some((e.clone(), (rx, e.seq, done)));
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::warn!("event stream lagged by {n} events");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        })
        .boxed(),
    };
    stream::iter(past).chain(live).map(|e| Ok(sse_event(&e)))
}

fn not_ready(state: JobState) -> ApiError {
    ApiError::new(
        StatusCode::CONFLICT,
        "not_ready",
        format!("job is {}, the result exists once it is DONE", serde_json::to_value(state).unwrap_or_default()),
    )
}

async fn send_file(path: std::path::PathBuf, content_type: &'static str) -> ApiResult<Response> {
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, content_type)], Body::from(bytes)).into_response())
}

async fn result(State(svc): State<Arc<JobService>>, Path(id): Path<String>) -> ApiResult<Response> {
    let record = svc.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    match (record.state, record.result) {
        (JobState::Done, Some(path)) => send_file(path, "image/png").await,
        (state, _) => Err(not_ready(state)),
    }
}

async fn manifest(State(svc): State<Arc<JobService>>, Path(id): Path<String>) -> ApiResult<Response> {
    let record = svc.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    if record.state != JobState::Done {
        return Err(not_ready(record.state));
    }
    send_file(record.spec.manifest_path(), "application/json").await
}

async fn telemetry(State(svc): State<Arc<JobService>>, Path(id): Path<String>) -> ApiResult<Response> {
    let record = svc.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    if record.state != JobState::Done {
        return Err(not_ready(record.state));
    }
    let path = svc
        .job_file(&id, "telemetry.csv")
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", "no telemetry for this job"))?;
    send_file(path, "text/csv").await
}

async fn preview(State(svc): State<Arc<JobService>>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    svc.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let path = svc
        .preview_path(&id, &name)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no preview `{name}`")))?;
    send_file(path, "image/png").await
}

async fn cancel(State(svc): State<Arc<JobService>>, Path(id): Path<String>) -> ApiResult<Response> {
    let state = svc
        .cancel(&id)
        .ok_or_else(|| ApiError::not_found(&id))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(Json(json!({ "id": id, "state": state })).into_response())
}
