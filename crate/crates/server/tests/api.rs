use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use obtod_core::policy::{BackendError, GenerationBackend, ScriptedBackend, STATE_PREFIX};
use obtod_core::{Engine, EngineConfig, Provenance, Role, Session, TurnResult};
use obtod_engine::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn engine() -> Engine {
    let cfg = EngineConfig::load(fixtures().join("engine.toml")).unwrap();
    Engine::from_config(&cfg).unwrap()
}

fn app(engine: Engine, log: &Path) -> (AppState, Router) {
    let state = AppState::open(engine, log).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/session", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn healthz() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(engine(), &dir.path().join("log.ndjson"));
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn session_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(engine(), &dir.path().join("log.ndjson"));
    let id = new_session(&app).await;

    let (status, body) = call(&app, "GET", &format!("/session/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["turns"], json!([]));

    let (status, body) =
        call(&app, "POST", &format!("/session/{id}/turn"), Some(json!({"text": "Can I cancel my train ticket?"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let result: TurnResult = serde_json::from_value(body).unwrap();
    assert_eq!(result.raw_state_text, "Explicit: cancellation policy for train");
    assert_eq!(result.knowledge.provenance, Provenance::Explicit);
    assert!(result.errors.is_empty());

    call(&app, "POST", &format!("/session/{id}/turn"), Some(json!({"text": "And on Friday?"}))).await;
    let (_, body) = call(&app, "GET", &format!("/session/{id}"), None).await;
    let session: Session = serde_json::from_value(body).unwrap();
    assert_eq!(session.turns.len(), 4);
    assert_eq!(session.trace.len(), 2);
    assert_eq!(session.turns[3].role, Role::System);
    assert_eq!(session.trace[0], result);
}

#[tokio::test]
async fn override_reacquires_from_the_chosen_source() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(engine(), &dir.path().join("log.ndjson"));
    let id = new_session(&app).await;
    let uri = format!("/session/{id}/turn");

    let body = json!({"text": "What if I cancel?", "override_source": "explicit",
                      "override_query": "cancel taxi booking extra charge"});
    let (status, r) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert_eq!(r["knowledge"]["query_used"], "cancel taxi booking extra charge");
    assert_eq!(r["knowledge"]["text"], "Cancellations made more than an hour before pickup are free.");
    // The model's own prediction is still reported.
    assert_eq!(r["raw_state_text"], "Explicit: cancellation policy for train");

    let body = json!({"text": "Trains to Ely?", "override_source": "database",
                      "override_query": "train destination = ely"});
    let (status, r) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert_eq!(r["knowledge"]["provenance"], "database");
    assert!(r["knowledge"]["text"].as_str().unwrap().starts_with("train matched = "), "{r}");

    let body = json!({"text": "hi", "override_source": "implicit"});
    let (status, r) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert_eq!(r["routed_state"]["source"], "implicit");
}

#[tokio::test]
async fn bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(engine(), &dir.path().join("log.ndjson"));
    let (status, _) = call(&app, "GET", "/session/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/session/nope/turn", Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let id = new_session(&app).await;
    let uri = format!("/session/{id}/turn");
    let (status, body) = call(&app, "POST", &uri, Some(json!({"text": "   "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let (status, _) = call(&app, "POST", &uri, Some(json!({"text": "hi", "override_query": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        call(&app, "POST", &uri, Some(json!({"text": "hi", "override_source": "database", "override_query": "zzz ="})))
            .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", &uri, Some(json!({"text": "hi", "override_source": "web"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, body) = call(&app, "GET", &format!("/session/{id}"), None).await;
    assert_eq!(body["turns"], json!([]), "rejected turns must not change the session");
}

#[tokio::test]
async fn provider_failure_leaves_session_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.ndjson");
    let (_, app) = app(engine().with_backend(Arc::new(ScriptedBackend::new())), &log);
    let id = new_session(&app).await;
    let (status, body) = call(&app, "POST", &format!("/session/{id}/turn"), Some(json!({"text": "hello"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    let (_, body) = call(&app, "GET", &format!("/session/{id}"), None).await;
    assert_eq!(body["turns"], json!([]));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1);
}

/// Blocks in `generate` until released.
struct Gate {
    entered: Mutex<Sender<()>>,
    release: Mutex<Receiver<()>>,
}

impl GenerationBackend for Gate {
    fn generate(&self, input: &str, _: usize) -> Result<String, BackendError> {
        if input.starts_with(STATE_PREFIX) {
            self.entered.lock().unwrap().send(()).unwrap();
            self.release.lock().unwrap().recv().unwrap();
            Ok("Database: hotel area = centre".into())
        } else {
            Ok("There are two hotels in the centre.".into())
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_turn_in_one_session_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (entered_tx, entered_rx) = channel();
    let (release_tx, release_rx) = channel();
    let gate = Gate { entered: Mutex::new(entered_tx), release: Mutex::new(release_rx) };
    let (_, app) = app(engine().with_backend(Arc::new(gate)), &dir.path().join("log.ndjson"));
    let a = new_session(&app).await;
    let b = new_session(&app).await;

    let first = tokio::spawn({
        let app = app.clone();
        let uri = format!("/session/{a}/turn");
        async move { call(&app, "POST", &uri, Some(json!({"text": "a hotel in the centre"}))).await }
    });
    tokio::task::spawn_blocking(move || entered_rx.recv().unwrap()).await.unwrap();

    let (status, body) = call(&app, "POST", &format!("/session/{a}/turn"), Some(json!({"text": "again"}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    // Other sessions stay readable while the turn is in flight.
    let (status, _) = call(&app, "GET", &format!("/session/{b}"), None).await;
    assert_eq!(status, StatusCode::OK);

    release_tx.send(()).unwrap();
    let (status, body) = first.await.unwrap();
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["response_text"], "There are two hotels in the centre.");
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("nested/log.ndjson");
    let (_, first) = app(engine(), &log);
    let id = new_session(&first).await;
    let other = new_session(&first).await;
    call(&first, "POST", &format!("/session/{id}/turn"), Some(json!({"text": "Can I cancel?"}))).await;
    call(&first, "POST", &format!("/session/{id}/turn"), Some(json!({"text": "Thanks."}))).await;
    let (_, before) = call(&first, "GET", &format!("/session/{id}"), None).await;

    let lines = std::fs::read_to_string(&log).unwrap();
    let events: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let kinds: Vec<&str> = events.iter().map(|e| e["event"].as_str().unwrap()).collect();
    assert_eq!(
        kinds,
        [
            "session_created",
            "session_created",
            "turn_appended",
            "turn_appended",
            "turn_result",
            "turn_appended",
            "turn_appended",
            "turn_result"
        ]
    );

    let (state, second) = app(engine(), &log);
    assert_eq!(state.session_count(), 2);
    let (_, after) = call(&second, "GET", &format!("/session/{id}"), None).await;
    assert_eq!(before, after);
    let (status, _) = call(&second, "GET", &format!("/session/{other}"), None).await;
    assert_eq!(status, StatusCode::OK);

    // The restored session keeps accepting turns.
    let (status, _) = call(&second, "POST", &format!("/session/{id}/turn"), Some(json!({"text": "One more."}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, body) = call(&second, "GET", &format!("/session/{id}"), None).await;
    assert_eq!(body["trace"].as_array().unwrap().len(), 3);
}
