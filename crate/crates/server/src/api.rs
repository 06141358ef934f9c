//! HTTP session service.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use obtod_core::engine::Override;
use obtod_core::{Engine, EngineError, KnowledgeSource, Session, TurnResult};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::Mutex;

use crate::log::{replay_log, LogError, LogEvent, SessionLog};

type Slot = Arc<Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    sessions: Arc<RwLock<HashMap<String, Slot>>>,
    log: Arc<SessionLog>,
}

impl AppState {
    /// Opens the log, restoring every session recorded in it.
    pub fn open(engine: Engine, log_path: impl AsRef<std::path::Path>) -> Result<Self, LogError> {
        let restored = replay_log(&log_path)?;
        let log = SessionLog::open(&log_path)?;
        tracing::info!(sessions = restored.len(), log = %log.path().display(), "session log replayed");
        let sessions = restored.into_iter().map(|s| (s.session_id.clone(), Arc::new(Mutex::new(s)))).collect();
        Ok(Self { engine: Arc::new(engine), sessions: Arc::new(RwLock::new(sessions)), log: Arc::new(log) })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    fn slot(&self, id: &str) -> Result<Slot, ApiError> {
        let map = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        map.get(id).cloned().ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/turn", post(post_turn))
        .with_state(state)
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no session '{0}'")]
    UnknownSession(String),
    #[error("a turn is already in flight for session '{0}'")]
    Busy(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("turn task failed: {0}")]
    Join(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::Busy(_) => StatusCode::CONFLICT,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Engine(e) if e.is_unavailable() => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Engine(EngineError::Dialog(_) | EngineError::BadOverride(_)) => StatusCode::BAD_REQUEST,
            ApiError::Engine(_) | ApiError::Log(_) | ApiError::Join(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub text: String,
    #[serde(default)]
    pub override_source: Option<KnowledgeSource>,
    #[serde(default)]
    pub override_query: Option<String>,
}

impl TurnRequest {
    fn override_spec(&self) -> Result<Option<Override>, ApiError> {
        match (self.override_source, &self.override_query) {
            (Some(source), query) => Ok(Some(Override { source, query: query.clone() })),
            (None, Some(_)) => Err(ApiError::BadRequest("override_query needs override_source".into())),
            (None, None) => Ok(None),
        }
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(State(app): State<AppState>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let session = Session::with_time(uuid::Uuid::new_v4().to_string(), Utc::now());
    let event = LogEvent::SessionCreated { session_id: session.session_id.clone(), created_at: session.created_at };
    let log = Arc::clone(&app.log);
    tokio::task::spawn_blocking(move || log.append(&[event])).await.map_err(|e| ApiError::Join(e.to_string()))??;
    let id = session.session_id.clone();
    app.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    let slot = app.slot(&id)?;
    let session = slot.lock().await;
    Ok(Json(session.clone()))
}

async fn post_turn(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Json<TurnResult>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let over = req.override_spec()?;
    let slot = app.slot(&id)?;
    let mut guard = slot.try_lock_owned().map_err(|_| ApiError::Busy(id.clone()))?;
    let before = guard.clone();
    let engine = Arc::clone(&app.engine);
    let log = Arc::clone(&app.log);
    let (after, result) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let (after, result) = engine.run_turn(&before, &req.text, over.as_ref())?;
        let events: Vec<LogEvent> = after.turns[before.turns.len()..]
            .iter()
            .map(|t| LogEvent::TurnAppended { session_id: after.session_id.clone(), turn: t.clone() })
            .chain([LogEvent::TurnResult { session_id: after.session_id.clone(), result: Box::new(result.clone()) }])
            .collect();
        log.append(&events)?;
        Ok((after, result))
    })
    .await
    .map_err(|e| ApiError::Join(e.to_string()))??;
    *guard = after;
    Ok(Json(result))
}
