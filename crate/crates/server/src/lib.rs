//! REST front end for judgment sessions.
//!
//! Routes:
//!
//! | method | path                       | body                                   | reply                          |
//! |--------|----------------------------|----------------------------------------|--------------------------------|
//! | GET    | `/sets`                    |                                        | `[{group, trials}]`            |
//! | POST   | `/sessions`                | `{set, participant}`                   | `{session_id}`                 |
//! | GET    | `/sessions/{id}/next`      |                                        | trial view or `{done: true}`   |
//! | POST   | `/sessions/{id}/responses` | `{trial_id, choice, confidence, ...}`  | `{ok, answered, total, state}` |
//! | GET    | `/sessions/{id}/progress`  |                                        | `{answered, total, state}`     |
//!
//! Errors come back as `{error, message}` with 404 (unknown session,
//! set or trial), 409 (duplicate or out-of-order submission, closed
//! session) or 422 (bad confidence, empty participant, malformed body).

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use contstim_core::experiment::{Choice, ExperimentError, SessionStore};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

/// All session state sits behind one lock; every request is a short
/// in-memory update plus one log append.
#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<SessionStore>>,
}

impl AppState {
    pub fn new(store: SessionStore) -> Self {
        Self { store: Arc::new(Mutex::new(store)) }
    }

    fn lock(&self) -> MutexGuard<'_, SessionStore> {
        // A panic mid-request leaves the store consistent (records are applied
        // only after the log write succeeds), so poisoning is ignored.
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Writes a snapshot; used on shutdown.
    pub fn snapshot(&self) -> contstim_core::experiment::Result<()> {
        self.lock().snapshot()
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String, String);

impl From<ExperimentError> for ApiError {
    fn from(e: ExperimentError) -> Self {
        let (status, kind) = match &e {
            ExperimentError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ExperimentError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ExperimentError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError(status, kind.into(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::UNPROCESSABLE_ENTITY, "validation".into(), e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "message": self.2 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub set: usize,
    pub participant: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Debug, Deserialize)]
pub struct Submit {
    pub trial_id: String,
    pub choice: Choice,
    pub confidence: u8,
    #[serde(default)]
    pub elapsed_ms: u64,
}

#[derive(Serialize)]
struct SetSummary {
    group: usize,
    trials: usize,
}

async fn list_sets(State(st): State<AppState>) -> Json<Vec<SetSummary>> {
    Json(st.lock().sets().map(|s| SetSummary { group: s.group, trials: s.trials.len() }).collect())
}

async fn create_session(State(st): State<AppState>, body: Result<Json<CreateSession>, JsonRejection>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let Json(req) = body?;
    let s = st.lock().create_session(req.set, &req.participant)?;
    log::info!("session {} for '{}' on set {}", s.id, s.participant, s.set);
    Ok((StatusCode::CREATED, Json(Created { session_id: s.id })))
}

async fn next_trial(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    let next = st.lock().next_trial(&id)?;
    Ok(Json(match next {
        Some(view) => serde_json::to_value(view).expect("trial view serializes"),
        None => json!({ "done": true }),
    }))
}

async fn submit(State(st): State<AppState>, Path(id): Path<String>, body: Result<Json<Submit>, JsonRejection>) -> ApiResult<serde_json::Value> {
    let Json(req) = body?;
    let p = st.lock().submit(&id, &req.trial_id, req.choice, req.confidence, req.elapsed_ms)?;
    Ok(Json(json!({ "ok": true, "answered": p.answered, "total": p.total, "state": p.state })))
}

async fn progress(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<contstim_core::experiment::Progress> {
    Ok(Json(st.lock().progress(&id)?))
}

/// The session API, optionally serving a static participant UI from
/// `assets` for every other path.
pub fn router(state: AppState, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sets", get(list_sets))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_trial))
        .route("/sessions/{id}/responses", post(submit))
        .route("/sessions/{id}/progress", get(progress))
        .with_state(state);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until Ctrl-C, then snapshots the store.
pub async fn serve(state: AppState, assets: Option<PathBuf>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let app = router(state.clone(), assets);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    state.snapshot().map_err(std::io::Error::other)
}
