//! The session API driven in-process through `tower::ServiceExt::oneshot`.

#[path = "../../core/tests/support/materials.rs"]
mod materials;

use std::fs;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use contstim_core::experiment::{build_stimulus_sets, read_response_log, SessionState, SessionStore, StimulusSet};
use contstim_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn sets() -> Vec<StimulusSet> {
    build_stimulus_sets(&materials::paper_shape(3), 3, 17).unwrap()
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
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into())) };
    (status, v)
}

async fn create(app: &Router, set: usize, who: &str) -> String {
    let (st, v) = call(app, "POST", "/sessions", Some(json!({ "set": set, "participant": who }))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn answer_next(app: &Router, id: &str) -> Option<Value> {
    let (st, view) = call(app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(st, StatusCode::OK);
    if view.get("done").is_some() {
        return None;
    }
    let body = json!({ "trial_id": view["trial_id"], "choice": "left", "confidence": 2, "elapsed_ms": 900 });
    let (st, ack) = call(app, "POST", &format!("/sessions/{id}/responses"), Some(body)).await;
    assert_eq!(st, StatusCode::OK, "{ack}");
    assert_eq!(ack["ok"], true);
    Some(view)
}

#[tokio::test]
async fn full_session_over_http() {
    let sets = sets();
    let app = router(AppState::new(SessionStore::in_memory(sets.clone())), None);
    let (st, listing) = call(&app, "GET", "/sets", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(listing.as_array().unwrap().len(), 3);
    assert_eq!(listing[0]["trials"], 165);

    let id = create(&app, 2, "p-17").await;
    let mut served = Vec::new();
    while let Some(view) = answer_next(&app, &id).await {
        // Blind presentation: only text and position go out.
        let keys: Vec<&str> = view.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["index", "left", "right", "total", "trial_id"]);
        served.push(view["trial_id"].as_str().unwrap().to_string());
    }
    let order: Vec<String> = sets[1].trials.iter().map(|t| t.id.clone()).collect();
    assert_eq!(served, order);
    let (_, p) = call(&app, "GET", &format!("/sessions/{id}/progress"), None).await;
    assert_eq!(p, json!({ "answered": 165, "total": 165, "state": "complete" }));
    let (_, done) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(done, json!({ "done": true }));
}

#[tokio::test]
async fn error_statuses() {
    let app = router(AppState::new(SessionStore::in_memory(sets())), None);
    let (st, v) = call(&app, "POST", "/sessions", Some(json!({ "set": 9, "participant": "x" }))).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (st, _) = call(&app, "POST", "/sessions", Some(json!({ "set": 1, "participant": " " }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, "POST", "/sessions", Some(json!({ "participant": "x" }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, "GET", "/sessions/nope/next", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "GET", "/sessions/nope/progress", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let id = create(&app, 1, "p").await;
    let first = answer_next(&app, &id).await.unwrap();
    let url = format!("/sessions/{id}/responses");
    // Resubmitting the answered trial.
    let (st, v) = call(&app, "POST", &url, Some(json!({ "trial_id": first["trial_id"], "choice": "right", "confidence": 1 }))).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::CONFLICT, Some("conflict")));
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(view["index"], 1);
    // Skipping ahead.
    let (_, listing) = call(&app, "GET", "/sets", None).await;
    assert!(listing.is_array());
    let far = sets()[0].trials[5].id.clone();
    let (st, _) = call(&app, "POST", &url, Some(json!({ "trial_id": far, "choice": "right", "confidence": 1 }))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    for bad in [json!(0), json!(4)] {
        let (st, _) = call(&app, "POST", &url, Some(json!({ "trial_id": view["trial_id"], "choice": "left", "confidence": bad }))).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (st, _) = call(&app, "POST", &url, Some(json!({ "trial_id": view["trial_id"], "choice": "up", "confidence": 1 }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&app, "POST", &url, Some(json!({ "trial_id": "g01-t999", "choice": "left", "confidence": 1 }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (_, p) = call(&app, "GET", &format!("/sessions/{id}/progress"), None).await;
    assert_eq!(p["answered"], 1);
}

#[tokio::test]
async fn restart_resumes_at_first_unanswered_trial() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("responses.jsonl");
    let sets = sets();
    let id = {
        let app = router(AppState::new(SessionStore::open(sets.clone(), &log).unwrap().with_snapshot_every(10)), None);
        let id = create(&app, 3, "p-restart").await;
        for _ in 0..42 {
            answer_next(&app, &id).await.unwrap();
        }
        id
    };
    let app = router(AppState::new(SessionStore::open(sets.clone(), &log).unwrap()), None);
    let (_, p) = call(&app, "GET", &format!("/sessions/{id}/progress"), None).await;
    assert_eq!((p["answered"].as_u64(), p["state"].as_str()), (Some(42), Some("active")));
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(view["index"], 42);
    assert_eq!(view["trial_id"].as_str().unwrap(), sets[2].trials[42].id);
    while answer_next(&app, &id).await.is_some() {}

    let sessions = read_response_log(&log, &sets, u64::MAX).unwrap();
    assert_eq!(sessions.len(), 1);
    assert_eq!(sessions[0].state, SessionState::Complete);
    assert_eq!(sessions[0].responses.len(), 165);
}

#[tokio::test]
async fn concurrent_sessions_do_not_interfere() {
    let sets = sets();
    let app = router(AppState::new(SessionStore::in_memory(sets.clone())), None);
    let mut handles = Vec::new();
    for k in 0..6 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let id = create(&app, k % 3 + 1, &format!("p{k}")).await;
            let mut n = 0;
            while answer_next(&app, &id).await.is_some() {
                n += 1;
            }
            n
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), 165);
    }
}

#[tokio::test]
async fn serves_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("index.html"), "<html>judge</html>").unwrap();
    let app = router(AppState::new(SessionStore::in_memory(sets())), Some(dir.path().to_path_buf()));
    let (st, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, Value::String("<html>judge</html>".into()));
    let (st, _) = call(&app, "GET", "/sets", None).await;
    assert_eq!(st, StatusCode::OK);
}
