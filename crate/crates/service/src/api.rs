//! HTTP surface of the session service.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/v1/sessions` | `{prompt, settings?}` | 201 session |
//! | GET | `/v1/sessions` | | `{sessions: [id]}` |
//! | GET | `/v1/sessions/{id}` | | session |
//! | POST | `/v1/sessions/{id}/advance` | | session |
//! | POST | `/v1/sessions/{id}/run` | | session at rest |
//! | POST | `/v1/sessions/{id}/edits` | edit request | 202 session |
//! | POST | `/v1/sessions/{id}/finish` | | session |
//! | GET | `/v1/sessions/{id}/stages/{n}` | | PNG |
//! | GET | `/v1/sessions/{id}/events?since=&follow=` | | NDJSON events |
//! | POST | `/v1/blobs` | PNG bytes | 201 `{ref}` |
//!
//! Errors are `{"code", "message"}` with 404 for unknown sessions or
//! blobs, 409 for state preconditions, 422 for unusable input or planner
//! output and 502 for backend failures.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, StreamExt};
use layercraft_core::coordinator::CoordinatorError;
use layercraft_core::image::Image;
use layercraft_core::session::{BlobError, EditRequest, SessionSettings, SessionState, UserPrompt};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::service::{Service, ServiceError};
use crate::store::{Event, StoreError};

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create).get(list))
        .route("/v1/sessions/{id}", get(show))
        .route("/v1/sessions/{id}/advance", post(advance))
        .route("/v1/sessions/{id}/run", post(run))
        .route("/v1/sessions/{id}/edits", post(edit))
        .route("/v1/sessions/{id}/finish", post(finish))
        .route("/v1/sessions/{id}/stages/{n}", get(stage))
        .route("/v1/sessions/{id}/events", get(events))
        .route("/v1/blobs", post(upload))
        .with_state(service)
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

fn status_of(e: &ServiceError) -> StatusCode {
    use CoordinatorError as C;
    match e {
        ServiceError::Store(StoreError::NotFound(_)) => StatusCode::NOT_FOUND,
        ServiceError::Store(_) | ServiceError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        ServiceError::Precondition(_) => StatusCode::CONFLICT,
        ServiceError::Coordinator(c) => match c {
            C::Precondition(_) => StatusCode::CONFLICT,
            C::Blob(BlobError::NotFound(_)) => StatusCode::NOT_FOUND,
            C::Blob(_) => StatusCode::INTERNAL_SERVER_ERROR,
            C::Backend(_) | C::StageFailed { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        },
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.0.code(), "message": self.0.to_string()});
        (status_of(&self.0), Json(body)).into_response()
    }
}

fn unprocessable(message: impl Into<String>) -> Response {
    let body = json!({"code": "InvalidInput", "message": message.into()});
    (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response()
}

type ApiResult<T> = Result<T, ApiError>;

/// Service calls block on backends and the filesystem.
async fn blocking<T, F>(service: Arc<Service>, f: F) -> ApiResult<T>
where
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .expect("service task panicked")
        .map_err(ApiError)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptField {
    Text(String),
    Full(UserPrompt),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    prompt: PromptField,
    #[serde(default)]
    settings: Option<SessionSettings>,
}

async fn create(State(service): State<Arc<Service>>, body: Bytes) -> Response {
    let body: CreateBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return unprocessable(e.to_string()),
    };
    let prompt = match body.prompt {
        PromptField::Text(text) => UserPrompt::new(text),
        PromptField::Full(p) => p,
    };
    let settings = body.settings.unwrap_or_default();
    match blocking(service, move |s| s.create_session(prompt, settings)).await {
        Ok(state) => (StatusCode::CREATED, Json(state)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn list(State(service): State<Arc<Service>>) -> ApiResult<Json<serde_json::Value>> {
    let ids = blocking(service, |s| Ok(s.store().list_sessions()?)).await?;
    Ok(Json(json!({"sessions": ids})))
}

async fn show(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionState>> {
    Ok(Json(blocking(service, move |s| s.get(&id)).await?))
}

async fn advance(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionState>> {
    Ok(Json(blocking(service, move |s| s.advance(&id)).await?))
}

async fn run(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionState>> {
    Ok(Json(
        blocking(service, move |s| s.run_until_rest(&id)).await?,
    ))
}

async fn edit(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let request: EditRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return unprocessable(e.to_string()),
    };
    match blocking(service, move |s| s.submit_edit(&id, request)).await {
        Ok(state) => (StatusCode::ACCEPTED, Json(state)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn finish(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionState>> {
    Ok(Json(blocking(service, move |s| s.finish(&id)).await?))
}

async fn stage(
    State(service): State<Arc<Service>>,
    Path((id, n)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let png = blocking(service, move |s| s.stage_png(&id, n)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn upload(State(service): State<Arc<Service>>, body: Bytes) -> Response {
    if let Err(e) = Image::from_png(&body) {
        return unprocessable(format!("not a PNG image: {e}"));
    }
    match blocking(service, move |s| Ok(s.store().put(&body)?)).await {
        Ok(blob) => (StatusCode::CREATED, Json(json!({"ref": blob}))).into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Deserialize)]
struct EventQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    follow: bool,
}

fn ndjson_line(event: &Event) -> Bytes {
    let mut line = serde_json::to_vec(event).expect("events serialize");
    line.push(b'\n');
    Bytes::from(line)
}

/// Stored events with `seq > since`; with `follow`, the stream stays open
/// and carries new events as they happen.
async fn events(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
) -> ApiResult<Response> {
    // Subscribe before reading the log so nothing falls between the two.
    let live = q.follow.then(|| service.subscribe());
    let lookup = id.clone();
    let stored = blocking(service, move |s| {
        s.get(&lookup)?;
        Ok(s.store().events(&lookup, q.since)?)
    })
    .await?;
    let seen = stored.last().map_or(q.since, |e| e.seq);
    let head = stream::iter(
        stored
            .iter()
            .map(ndjson_line)
            .map(Ok::<_, Infallible>)
            .collect::<Vec<_>>(),
    );
    let body = match live {
        None => Body::from_stream(head),
        Some(rx) => {
            let tail = stream::unfold((rx, seen), move |(mut rx, seen)| {
                let id = id.clone();
                async move {
                    loop {
                        match rx.recv().await {
                            Ok((sid, event)) if sid == id && event.seq > seen => {
                                let line = ndjson_line(&event);
                                return Some((Ok(line), (rx, event.seq)));
                            }
                            Ok(_) | Err(RecvError::Lagged(_)) => continue,
                            Err(RecvError::Closed) => return None,
                        }
                    }
                }
            });
            Body::from_stream(head.chain(tail))
        }
    };
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
