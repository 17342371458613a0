//! HTTP API.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::Value;
use tokio::sync::broadcast::error::RecvError;

use crate::schemas::{ErrorBody, ScenarioList, SessionList};
use crate::session::{run_session, ApiError, AppState, CreateSessionRequest, FeedbackRequest};
use crate::store::{Event, EventKind, SessionStatus};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
            ApiError::Internal(e) => {
                tracing::error!(error = %format!("{e:#}"), "internal error");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/events", get(stream_events))
        .route("/api/sessions/{id}/feedback", post(post_feedback))
        .route("/api/sessions/{id}/replay", post(replay_session))
        .route("/api/kb", get(get_kb))
        .route("/api/kb/reload", post(reload_kb))
        .route("/api/scenarios", get(list_scenarios))
        .route("/api/schemas", get(get_schemas))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.config.server.token {
        let given = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::Unauthorized("missing or wrong bearer token".into()).into_response();
        }
    }
    next.run(request).await
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(mut body): Json<CreateSessionRequest>,
) -> Result<Response, ApiError> {
    if body.idempotency_key.is_none() {
        body.idempotency_key = headers
            .get("idempotency-key")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
    }
    let (session, created) = state.create_session(&body)?;
    let id = session.id();
    if created {
        let state = state.clone();
        tokio::task::spawn_blocking(move || run_session(&state, &session));
    }
    let view = state.session_state(&id)?;
    let code = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((code, Json(view)).into_response())
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<SessionList> {
    Json(SessionList {
        sessions: state.store.list(),
    })
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.session_state(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: u64,
    /// `false` ends the stream after the stored history.
    #[serde(default = "yes")]
    follow: bool,
}

fn yes() -> bool {
    true
}

fn to_sse(event: &Event) -> SseEvent {
    SseEvent::default()
        .id(event.seq.to_string())
        .event(serde_json::to_value(event.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
        .data(serde_json::to_string(event).unwrap_or_default())
}

fn ends_stream(event: &Event) -> bool {
    event.kind == EventKind::Status
        && event
            .data
            .get("status")
            .and_then(|s| serde_json::from_value::<SessionStatus>(s.clone()).ok())
            .is_some_and(SessionStatus::is_terminal)
}

/// Server-sent events with `seq > from`: stored history first, then the
/// live tail until the session is done. Clients dedupe by `id`.
async fn stream_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let session = state.session(&id)?;
    let (history, rx) = session.subscribe_from(query.from);
    let last = history.last().map_or(query.from, |e| e.seq);
    let finished = !query.follow || session.status().is_terminal() || history.iter().any(ends_stream);
    let history = stream::iter(history.into_iter().map(|e| Ok(to_sse(&e))));
    let tail = stream::unfold((rx, last, finished, session), |(mut rx, mut last, finished, session)| async move {
        if finished {
            return None;
        }
        loop {
            match rx.recv().await {
                Ok(event) if event.seq <= last => continue,
                Ok(event) => {
                    last = event.seq;
                    let done = ends_stream(&event);
                    return Some((vec![event], (rx, last, done, session)));
                }
                Err(RecvError::Lagged(_)) => {
                    // Fell behind the channel; catch up from the log.
                    let missed = session.events_after(last);
                    let done = missed.iter().any(ends_stream);
                    if let Some(e) = missed.last() {
                        last = e.seq;
                    }
                    return Some((missed, (rx, last, done, session)));
                }
                Err(RecvError::Closed) => return None,
            }
        }
    })
    .flat_map(|batch| stream::iter(batch.into_iter().map(|e| Ok(to_sse(&e)))));
    Ok(Sse::new(history.chain(tail)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

async fn post_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<FeedbackRequest>,
) -> Result<Response, ApiError> {
    let ack = state.post_feedback(&id, &body)?;
    Ok((StatusCode::ACCEPTED, Json(ack)).into_response())
}

async fn replay_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let state2 = state.clone();
    let outcome = tokio::task::spawn_blocking(move || crate::session::replay(&state2, &id))
        .await
        .map_err(|e| ApiError::Internal(e.into()))??;
    Ok(Json(outcome).into_response())
}

async fn get_kb(State(state): State<Arc<AppState>>) -> Response {
    Json(state.kb_view()).into_response()
}

async fn reload_kb(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    Ok(Json(state.reload_kb()?).into_response())
}

async fn list_scenarios(State(state): State<Arc<AppState>>) -> Response {
    Json(ScenarioList {
        scenarios: state.scenario_list(),
    })
    .into_response()
}

async fn get_schemas() -> Json<Value> {
    Json(crate::schemas::all())
}
