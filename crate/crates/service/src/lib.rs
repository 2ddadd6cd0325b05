//! HTTP API over the world model: sessions with a hidden true world, belief
//! tracking as weeks are committed, and read-only candidate rollouts.
//!
//! Sessions live in memory for the lifetime of the process. Each session is
//! behind its own lock, so requests to one session are serialized while
//! different sessions proceed independently.

mod error;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;

pub use error::ApiError;
pub use session::{CreateRequest, RolloutRequest, Session, StepRequest};

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

type Shared = Arc<AppState>;

pub fn router() -> Router {
    router_with(Arc::new(AppState::default()))
}

pub fn router_with(state: Shared) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/rollouts", post(rollout_candidates))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/export", get(export))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router()).await
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(ApiError::bad_json)
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(ApiError::bad_json)
}

fn lookup(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    state.sessions.read().expect("session map").get(id).cloned().ok_or_else(|| ApiError::not_found(id))
}

/// Runs CPU-bound session work off the async executor.
async fn with_session<T, F>(state: Shared, id: String, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
{
    let session = lookup(&state, &id)?;
    tokio::task::spawn_blocking(move || {
        let mut guard = session.lock().expect("session lock");
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError::new(500, "internal", &e.to_string(), vec![]))?
}

async fn healthz() -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(state): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse(&body)?;
    let n = state.next_id.fetch_add(1, Ordering::SeqCst) + 1;
    let id = format!("s{n:06}");
    let session = tokio::task::spawn_blocking(move || Session::new(id, req))
        .await
        .map_err(|e| ApiError::new(500, "internal", &e.to_string(), vec![]))??;
    let view = session.view();
    state.sessions.write().expect("session map").insert(view.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let view = with_session(state, id, |s| Ok(s.view())).await?;
    Ok(Json(view).into_response())
}

async fn step_session(
    State(state): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let mut req: StepRequest = parse_required(&body)?;
    if req.idempotency_key.is_none() {
        if let Some(v) = headers.get("idempotency-key") {
            let key = v
                .to_str()
                .map_err(|_| ApiError::unprocessable("invalid_header", "Idempotency-Key must be ASCII", vec![]))?;
            req.idempotency_key = Some(key.to_string());
        }
    }
    let resp = with_session(state, id, move |s| s.step(req)).await?;
    Ok(Json(resp).into_response())
}

async fn rollout_candidates(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: RolloutRequest = parse_required(&body)?;
    let resp = with_session(state, id, move |s| s.rollouts(&req)).await?;
    Ok(Json(resp).into_response())
}

async fn history(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let h = with_session(state, id, |s| Ok(s.history())).await?;
    Ok(Json(h).into_response())
}

async fn export(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let e = with_session(state, id, |s| Ok(s.export())).await?;
    Ok(Json(e).into_response())
}
