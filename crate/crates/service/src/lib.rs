//! HTTP/JSON service over `sketch-core`.
//!
//! Routes:
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/health` | | `Health` |
//! | POST | `/runs` | `RunConfig` | `RunOutput` |
//! | POST | `/sessions` | `SessionSpec` | `SessionInfo` (201) |
//! | GET | `/sessions` | | `[SessionInfo]` |
//! | GET | `/sessions/{id}` | | `SessionInfo` |
//! | POST | `/sessions/{id}/rows` | `RowBatch` | `SessionInfo` |
//! | GET | `/sessions/{id}/sketch?at=t` | | `SessionSketch` |
//! | DELETE | `/sessions/{id}` | | 204 |
//!
//! Errors come back as `ErrorBody` with 400 for bad input, 404 for unknown
//! sessions, 422 for unreadable or malformed stream files and 500 otherwise. File paths in
//! a run config are resolved on the server.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use sketch_core::bench::{run_scenario, RunConfig, RunOutput};
use sketch_core::session::{ErrorBody, Health, RowBatch, Session, SessionInfo, SessionSketch, SessionSpec};
use sketch_core::Error;
use tokio::net::TcpListener;

type Shared = Arc<Mutex<Session>>;

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<u64, Shared>>,
    next_id: AtomicU64,
}

impl AppState {
    fn session(&self, id: u64) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(id: u64) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("no session {id}"),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) => StatusCode::BAD_REQUEST,
            Error::Format { .. } | Error::OracleCapExceeded { .. } | Error::Io(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Protocol(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

/// Runs CPU-bound work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("worker failed: {e}"),
    })?
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn create_run(Json(cfg): Json<RunConfig>) -> Result<Json<RunOutput>, ApiError> {
    tracing::info!(scenario = %cfg.scenario, "run requested");
    let out = blocking(move || run_scenario(&cfg).map_err(ApiError::from)).await?;
    Ok(Json(out))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(spec): Json<SessionSpec>,
) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let session = Session::new(spec)?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let info = session.info(id);
    state
        .sessions
        .write()
        .expect("session map poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(info)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionInfo>> {
    let map = state.sessions.read().expect("session map poisoned");
    let mut out: Vec<SessionInfo> = map
        .iter()
        .map(|(&id, s)| s.lock().expect("session poisoned").info(id))
        .collect();
    out.sort_by_key(|i| i.id);
    Json(out)
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<SessionInfo>, ApiError> {
    let s = state.session(id)?;
    let info = s.lock().expect("session poisoned").info(id);
    Ok(Json(info))
}

async fn push_rows(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(batch): Json<RowBatch>,
) -> Result<Json<SessionInfo>, ApiError> {
    let s = state.session(id)?;
    let info = blocking(move || {
        let mut g = s.lock().expect("session poisoned");
        g.push(&batch)?;
        Ok(g.info(id))
    })
    .await?;
    Ok(Json(info))
}

#[derive(Deserialize)]
struct SketchQuery {
    at: Option<u64>,
}

async fn get_sketch(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Query(q): Query<SketchQuery>,
) -> Result<Json<SessionSketch>, ApiError> {
    let s = state.session(id)?;
    let out = blocking(move || Ok(s.lock().expect("session poisoned").query(q.at)?)).await?;
    Ok(Json(out))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    state
        .sessions
        .write()
        .expect("session map poisoned")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found(id))
}

pub fn router() -> Router {
    router_with(Arc::new(AppState::default()))
}

pub fn router_with(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/runs", post(create_run))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/rows", post(push_rows))
        .route("/sessions/{id}/sketch", get(get_sketch))
        .with_state(state)
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve(listener: TcpListener, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, router()).with_graceful_shutdown(shutdown).await
}
