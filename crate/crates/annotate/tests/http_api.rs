use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dmsl_annotate::service::{JobState, LandmarksView};
use dmsl_annotate::{router, AppState, Store, TemplateDetector};
use dmsl_core::raster::Raster;
use dmsl_core::{LandmarkSet, Point, SampleRecord, Variation};
use serde_json::{json, Value};
use tower::ServiceExt;

fn face() -> LandmarkSet {
    LandmarkSet::from_fn(|i| Point::new(0.2 + (i % 10) as f64 * 0.05, 0.2 + (i / 10) as f64 * 0.08))
}

struct Fixture {
    app: Router,
    state: AppState,
    _dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let img = Raster::filled(48, 48, 3, 0.5);
    img.save_png(&dir.path().join("vis.png")).unwrap();
    Raster::filled(48, 48, 1, 0.3).save_png(&dir.path().join("th.png")).unwrap();
    let mut records: Vec<SampleRecord> = [Variation::Nn, Variation::Pl, Variation::Ld]
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut r = SampleRecord::new(i as u32 + 1, *v, "vis.png".into(), "th.png".into());
            r.fold_group = i as u8;
            r
        })
        .collect();
    records[0].landmarks = Some(face());
    records[1].landmarks = Some(face());
    records[1].calibrated = true;
    let mut store = Store::in_memory().unwrap();
    store.import(&records, false).unwrap();
    let state = AppState::new(store, dir.path(), Arc::new(TemplateDetector::default()));
    Fixture {
        app: router(state.clone()),
        state,
        _dir: dir,
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn list_filters() {
    let f = fixture();
    let (s, page) = call_json(&f.app, Method::GET, "/records", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page["total"], 3);
    let (_, page) = call_json(&f.app, Method::GET, "/records?calibrated=false&fold=&variation=", None).await;
    let ids: Vec<&str> = page["items"].as_array().unwrap().iter().map(|r| r["record_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["001_NN", "003_LD"]);
    let (_, page) = call_json(&f.app, Method::GET, "/records?fold=1", None).await;
    assert_eq!(page["items"][0]["record_id"], "002_PL");
    let (_, page) = call_json(&f.app, Method::GET, "/records?variation=ld&limit=1", None).await;
    assert_eq!(page["items"].as_array().unwrap().len(), 1);
    let (s, _) = call_json(&f.app, Method::GET, "/records?fold=abc", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn image_endpoint_serves_png() {
    let f = fixture();
    let (s, bytes) = call(&f.app, Method::GET, "/records/001_NN/image?spectrum=TH", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&bytes[1..4], b"PNG");
    let (s, _) = call(&f.app, Method::GET, "/records/404_NN/image", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&f.app, Method::GET, "/records/001_NN/image?spectrum=UV", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn put_then_get_and_stale_version() {
    let f = fixture();
    let (s, view) = call_json(&f.app, Method::GET, "/records/001_NN/landmarks", None).await;
    assert_eq!(s, StatusCode::OK);
    let view: LandmarksView = serde_json::from_value(view).unwrap();
    assert_eq!(view.version, 0);

    let mut moved = face();
    moved.set(8, Point::new(0.31, 0.93));
    let payload = json!({"landmarks": moved.flatten(), "version": 0, "editor_id": "alice"});
    let (s, _) = call_json(&f.app, Method::PUT, "/records/001_NN/landmarks", Some(payload.clone())).await;
    assert_eq!(s, StatusCode::OK);

    let (_, view) = call_json(&f.app, Method::GET, "/records/001_NN/landmarks", None).await;
    let view: LandmarksView = serde_json::from_value(view).unwrap();
    assert_eq!(view.landmarks.unwrap(), moved.flatten());
    assert!(view.calibrated);
    assert_eq!(view.version, 1);
    let b = view.boundary.unwrap();
    assert!((b.y + b.h - 0.93).abs() < 1e-12);
    assert_eq!(view.history.len(), 2);
    assert_eq!(view.history[1].editor_id, "alice");

    let (s, body) = call_json(&f.app, Method::PUT, "/records/001_NN/landmarks", Some(payload)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["current_version"], 1);
}

#[tokio::test]
async fn validation_and_missing_records() {
    let f = fixture();
    let short = json!({"landmarks": vec![0.5; 134], "version": 0, "editor_id": "a"});
    let (s, _) = call_json(&f.app, Method::PUT, "/records/001_NN/landmarks", Some(short)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let mut out = face().flatten();
    out[16] = -0.1;
    let bad = json!({"landmarks": out, "version": 0, "editor_id": "a"});
    let (s, body) = call_json(&f.app, Method::PUT, "/records/001_NN/landmarks", Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["invalid_points"], json!([9]));
    let ok = json!({"landmarks": face().flatten(), "version": 0, "editor_id": "a"});
    let (s, _) = call_json(&f.app, Method::PUT, "/records/999_NN/landmarks", Some(ok)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&f.app, Method::GET, "/records/999_NN/landmarks", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn annotation_job_runs_in_background() {
    let f = fixture();
    let (s, status) = call_json(&f.app, Method::POST, "/annotate/run", Some(json!({}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(status["state"], "running");
    let mut done = false;
    for _ in 0..200 {
        let (_, st) = call_json(&f.app, Method::GET, "/annotate/status", None).await;
        if st["state"] == "done" {
            done = true;
            assert_eq!(st["progress"]["total"], 3);
            assert_eq!(st["progress"]["skipped_calibrated"], 1);
            assert_eq!(st["progress"]["annotated"], 2);
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(done);
    assert_eq!(f.state.job_status().state, JobState::Done);
    // The calibrated record keeps its landmarks; the others got the template.
    let calibrated = f.state.with_store(|s| s.get("002_PL").unwrap());
    assert_eq!(calibrated.version, 0);
    let auto = f.state.with_store(|s| s.get("003_LD").unwrap());
    assert!(auto.record.is_annotated() && !auto.record.calibrated);
}
