use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use apis_core::driver::{run_experiment, AnnotatorKind, Data, ExperimentConfig};
use apis_core::types::InstanceKey;
use apis_service::{router, Service};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

fn human(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        n_train: 6,
        n_test: 4,
        steps: 1,
        annotator: AnnotatorKind::Human,
        ..ExperimentConfig::default()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn create(app: &Router, cfg: &ExperimentConfig, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method("POST").uri("/sessions");
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let resp = app
        .clone()
        .oneshot(req.body(Body::from(cfg.to_json())).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

/// Answers queries from ground truth until `limit` answers or the run ends.
async fn drive(app: &Router, id: &str, data: &Data, limit: usize) -> usize {
    let mut given = 0;
    loop {
        if given == limit {
            return given;
        }
        let (status, q) = call(app, "GET", &format!("/sessions/{id}/query"), None).await;
        match status {
            StatusCode::OK => {
                let key = InstanceKey::new(q["image_id"].as_u64().unwrap() as u32, q["instance_id"].as_u64().unwrap() as u32);
                let (x, y) = (q["point"]["x"].as_u64().unwrap() as u32, q["point"]["y"].as_u64().unwrap() as u32);
                let label = u8::from(data.train.mask(key).unwrap().get(x, y));
                let body = json!({ "query_id": q["query_id"], "label": label });
                let (s, _) = call(app, "POST", &format!("/sessions/{id}/answer"), Some(body)).await;
                assert_eq!(s, StatusCode::OK);
                given += 1;
            }
            StatusCode::NO_CONTENT | StatusCode::CONFLICT => {
                let (_, rows) = call(app, "GET", &format!("/sessions/{id}/metrics"), None).await;
                if status == StatusCode::NO_CONTENT && rows.as_array().unwrap().len() == 2 {
                    return given;
                }
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
            other => panic!("unexpected status {other}"),
        }
    }
}

fn artifact(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn assert_protocol_equivalent(session_dir: &Path, cfg: &ExperimentConfig, data: &Data, tmp: &Path) {
    let sim_dir = tmp.join("simulated");
    let sim_cfg = ExperimentConfig {
        annotator: AnnotatorKind::Simulated,
        ..cfg.clone()
    };
    run_experiment(sim_cfg, data.clone(), Some(sim_dir.clone())).unwrap();
    for name in [
        "points_step_0.json",
        "points_step_1.json",
        "model_step_0.bin",
        "model_step_1.bin",
        "metrics.csv",
        "oracle_log.jsonl",
    ] {
        assert!(artifact(session_dir, name) == artifact(&sim_dir, name), "{name} differs");
    }
}

#[tokio::test]
async fn health_and_unknown_sessions() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(Service::open(tmp.path()).unwrap());
    let (s, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((s, body["status"].as_str()), (StatusCode::OK, Some("ok")));
    for (method, path) in [("GET", "query"), ("GET", "metrics")] {
        let (s, _) = call(&app, method, &format!("/sessions/nope/{path}"), None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
    }
    let (s, _) = call(&app, "POST", "/sessions/nope/answer", Some(json!({"query_id": 0, "label": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn create_rejects_bad_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(Service::open(tmp.path()).unwrap());
    let simulated = ExperimentConfig {
        annotator: AnnotatorKind::Simulated,
        ..human("sim")
    };
    let (s, body) = create(&app, &simulated, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "human sessions only");
    let resp = app
        .clone()
        .oneshot(
            Request::builder()
                .method("POST")
                .uri("/sessions")
                .body(Body::from(r#"{"stepz": 3}"#))
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let body: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(body["field"], "stepz");
}

#[tokio::test]
async fn idempotent_create() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(Service::open(tmp.path()).unwrap());
    let cfg = human("idem");
    let (s1, a) = create(&app, &cfg, Some("k-1")).await;
    let (s2, b) = create(&app, &cfg, Some("k-1")).await;
    let (_, c) = create(&app, &cfg, Some("k-2")).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a["session_id"], b["session_id"]);
    assert_ne!(a["session_id"], c["session_id"]);
    // The key survives a restart.
    let app = router(Service::open(tmp.path()).unwrap());
    let (_, d) = create(&app, &cfg, Some("k-1")).await;
    assert_eq!(a["session_id"], d["session_id"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn scripted_session_matches_simulated_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("sessions");
    let service: Arc<Service> = Service::open(&root).unwrap();
    let app = router(service);
    let cfg = human("scripted");
    let data = Data::load(&cfg).unwrap();
    let q = data.train.q();
    let (_, created) = create(&app, &cfg, None).await;
    let id = created["session_id"].as_str().unwrap().to_string();

    let (s, first) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(first["progress"], json!({ "answered": 0, "pending": q, "step": 0 }));
    let ppm = base64::engine::general_purpose::STANDARD
        .decode(first["image"].as_str().unwrap())
        .unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(ppm.len(), 13 + 64 * 64 * 3);
    let (_, rows) = call(&app, "GET", &format!("/sessions/{id}/metrics"), None).await;
    assert_eq!(rows, json!([]));

    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/answer"), Some(json!({"query_id": first["query_id"], "label": 2}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let given = drive(&app, &id, &data, 1).await;
    assert_eq!(given, 1);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/answer"), Some(json!({"query_id": first["query_id"], "label": 1}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, next) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(next["progress"], json!({ "answered": 1, "pending": q - 1, "step": 0 }));

    let total = drive(&app, &id, &data, usize::MAX).await;
    assert_eq!(total + 1, 2 * q);
    let (_, rows) = call(&app, "GET", &format!("/sessions/{id}/metrics"), None).await;
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_protocol_equivalent(&root.join(&id), &cfg, &data, tmp.path());
}

#[tokio::test(flavor = "multi_thread")]
async fn restarted_service_loses_no_answers() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("sessions");
    let cfg = human("restart");
    let data = Data::load(&cfg).unwrap();
    let q = data.train.q();
    let id = {
        let app = router(Service::open(&root).unwrap());
        let (_, created) = create(&app, &cfg, None).await;
        let id = created["session_id"].as_str().unwrap().to_string();
        assert_eq!(drive(&app, &id, &data, q / 2).await, q / 2);
        id
    };
    let app = router(Service::open(&root).unwrap());
    let (_, next) = call(&app, "GET", &format!("/sessions/{id}/query"), None).await;
    assert_eq!(next["progress"]["answered"], q / 2);
    // Finish step 0, then restart again in the middle of step 1.
    assert_eq!(drive(&app, &id, &data, q - q / 2 + 1).await, q - q / 2 + 1);
    drop(app);
    let app = router(Service::open(&root).unwrap());
    let (_, rows) = call(&app, "GET", &format!("/sessions/{id}/metrics"), None).await;
    assert_eq!(rows.as_array().unwrap().len(), 1);
    drive(&app, &id, &data, usize::MAX).await;
    assert_protocol_equivalent(&root.join(&id), &cfg, &data, tmp.path());
}
