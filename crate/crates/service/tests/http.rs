use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use epiworld_service::router;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn small_config(seed: u64) -> Value {
    json!({ "config": { "particles": 64, "horizon": 8 }, "seed": seed })
}

async fn create(app: &Router, seed: u64) -> String {
    let (s, v) = call_json(app, "POST", "/sessions", Some(small_config(seed))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

fn dims(level: i64) -> Value {
    json!(vec![level; 13])
}

#[tokio::test]
async fn healthz_ok() {
    let app = router();
    let (s, v) = call_json(&app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn create_returns_distinct_ids_with_provenance() {
    let app = router();
    let (s, v) = call_json(&app, "POST", "/sessions", Some(small_config(1))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["week"], 0);
    assert!(v["config_hash"].as_str().unwrap().len() == 64);
    assert!(v["seed_ledger"].as_array().unwrap().len() == 1);
    let other = create(&app, 1).await;
    assert_ne!(v["id"].as_str().unwrap(), other);
    // an empty body uses defaults
    let (s, _) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(s, StatusCode::CREATED);
}

#[tokio::test]
async fn invalid_action_table_is_422_with_details() {
    let app = router();
    let body = json!({ "config": { "actions": [ { "week": 0, "dims": [0, 9, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, -1] } ] } });
    let (s, v) = call_json(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid_action");
    assert_eq!(v["details"].as_array().unwrap().len(), 2);
    assert!(v["message"].is_string());
    let (s, v) = call_json(&app, "POST", "/sessions", Some(json!({ "config": { "particles": 0 } }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid_config");
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "bogus": 1 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn step_increments_cursor() {
    let app = router();
    let id = create(&app, 2).await;
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "dims": dims(2) }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["week"], 1);
    assert_eq!(v["observation"]["week"], 1);
    assert!(v["config_hash"].is_string());
    assert_eq!(v["seed_ledger"].as_array().unwrap().len(), 2);
    let (_, g) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(g["week"], 1);
    assert_eq!(g["summary"]["week"], 1);
}

#[tokio::test]
async fn idempotent_step_replay() {
    let app = router();
    let id = create(&app, 3).await;
    let uri = format!("/sessions/{id}/step");
    let body = json!({ "dims": dims(1), "idempotency_key": "abc" });
    let (s1, b1) = call(&app, "POST", &uri, Some(body.clone())).await;
    let (s2, b2) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(b1, b2);
    let (_, g) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(g["week"], 1);
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({ "dims": dims(3), "idempotency_key": "abc" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "idempotency_conflict");
}

#[tokio::test]
async fn idempotency_header_is_honored() {
    let app = router();
    let id = create(&app, 3).await;
    let mk = || {
        Request::builder()
            .method("POST")
            .uri(format!("/sessions/{id}/step"))
            .header("idempotency-key", "h1")
            .body(Body::from(json!({ "dims": dims(0) }).to_string()))
            .unwrap()
    };
    let a = app.clone().oneshot(mk()).await.unwrap().into_body().collect().await.unwrap().to_bytes();
    let b = app.clone().oneshot(mk()).await.unwrap().into_body().collect().await.unwrap().to_bytes();
    assert_eq!(a, b);
    let (_, g) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(g["week"], 1);
}

#[tokio::test]
async fn invalid_step_is_422_and_leaves_cursor() {
    let app = router();
    let id = create(&app, 4).await;
    let (_, before) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "dims": [5, 0, 0] }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid_action");
    assert!(v["details"].as_array().unwrap().len() >= 2);
    let (_, after) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(before["state_hash"], after["state_hash"]);
    assert_eq!(after["week"], 0);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = router();
    let (s, v) = call_json(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
    let (s, _) = call(&app, "POST", "/sessions/nope/step", Some(json!({ "dims": dims(0) }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rollouts_are_read_only_and_deterministic() {
    let app = router();
    let id = create(&app, 5).await;
    call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "dims": dims(1) }))).await;
    let (_, before) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    let req = json!({
        "candidates": [
            [ { "dims": dims(0) }, { "dims": dims(0) }, { "dims": dims(0) } ],
            [ { "dims": dims(4) }, { "dims": dims(4) }, { "dims": dims(4) } ],
        ],
        "samples": 8,
    });
    let uri = format!("/sessions/{id}/rollouts");
    let (s1, b1) = call(&app, "POST", &uri, Some(req.clone())).await;
    let (s2, b2) = call(&app, "POST", &uri, Some(req)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(b1, b2);
    let (_, after) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(before["state_hash"], after["state_hash"]);
    let v: Value = serde_json::from_slice(&b1).unwrap();
    assert_eq!(v["candidates"].as_array().unwrap().len(), 2);
    assert_eq!(v["ranking"].as_array().unwrap().len(), 2);
    assert!(!v["candidates"][0]["fan_chart"].as_array().unwrap().is_empty());
    assert_eq!(v["seed_ledger"][0]["purpose"], "rollout");
}

#[tokio::test]
async fn empty_horizon_rollout() {
    let app = router();
    let id = create(&app, 6).await;
    let (s, v) =
        call_json(&app, "POST", &format!("/sessions/{id}/rollouts"), Some(json!({ "candidates": [[]], "samples": 1 })))
            .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(v["candidates"][0]["fan_chart"].as_array().unwrap().is_empty());
    assert_eq!(v["candidates"][0]["rank"], 1);
}

#[tokio::test]
async fn duplicate_candidates_tie_by_index() {
    let app = router();
    let id = create(&app, 7).await;
    let c = json!([ { "dims": dims(2) }, { "dims": dims(2) } ]);
    let (_, v) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/rollouts"),
        Some(json!({ "candidates": [c.clone(), c], "samples": 4 })),
    )
    .await;
    assert_eq!(v["candidates"][0]["metrics"], v["candidates"][1]["metrics"]);
    assert_eq!(v["ranking"][0]["index"], 0);
    assert_eq!(v["ranking"][1]["index"], 1);
}

#[tokio::test]
async fn invalid_candidate_rejects_whole_request() {
    let app = router();
    let id = create(&app, 8).await;
    let good = json!([ { "dims": dims(1) } ]);
    let bad = json!([ { "dims": dims(1) }, { "dims": [7, 0] } ]);
    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/rollouts"),
        Some(json!({ "candidates": [good, bad], "samples": 2 })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["details"].as_array().unwrap().iter().all(|d| d.as_str().unwrap().starts_with("candidates[1][1]")));
    let (s, _) =
        call_json(&app, "POST", &format!("/sessions/{id}/rollouts"), Some(json!({ "candidates": [[]], "samples": 0 })))
            .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn sessions_are_isolated() {
    // interleaved traffic must not change what a session produces
    let solo = router();
    let a_solo = create(&solo, 11).await;
    let mut solo_out = Vec::new();
    for l in [1, 2, 3] {
        let (_, b) = call(&solo, "POST", &format!("/sessions/{a_solo}/step"), Some(json!({ "dims": dims(l) }))).await;
        solo_out.push(b);
    }

    let app = router();
    let a = create(&app, 11).await;
    let b = create(&app, 12).await;
    let mut mixed_out = Vec::new();
    for l in [1, 2, 3] {
        let (_, body) = call(&app, "POST", &format!("/sessions/{a}/step"), Some(json!({ "dims": dims(l) }))).await;
        call(&app, "POST", &format!("/sessions/{b}/step"), Some(json!({ "dims": dims(4 - l) }))).await;
        call(
            &app,
            "POST",
            &format!("/sessions/{b}/rollouts"),
            Some(json!({ "candidates": [[{ "dims": dims(0) }]], "samples": 2 })),
        )
        .await;
        mixed_out.push(body);
    }
    let strip = |v: &[u8]| {
        let mut j: Value = serde_json::from_slice(v).unwrap();
        j.as_object_mut().unwrap().remove("id");
        j
    };
    for (x, y) in solo_out.iter().zip(&mixed_out) {
        assert_eq!(strip(x), strip(y));
    }
}

#[tokio::test]
async fn history_and_export() {
    let app = router();
    let id = create(&app, 9).await;
    for l in [0, 4] {
        call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "dims": dims(l) }))).await;
    }
    let (s, h) = call_json(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["actions"].as_array().unwrap().len(), 2);
    assert_eq!(h["observations"].as_array().unwrap().len(), 2);
    assert_eq!(h["summaries"].as_array().unwrap().len(), 3);
    let (s, e) = call_json(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(e["seed"], 9);
    assert_eq!(e["config"]["particles"], 64);
}

#[tokio::test]
async fn twin_truth_mode() {
    let app = router();
    let body = json!({ "config": { "particles": 32, "truth_params": { "beta0": 2.0 } }, "seed": 1 });
    let (s, v) = call_json(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["twin_truth"], true);
}
