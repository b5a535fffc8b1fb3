use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{Duration, TimeZone, Utc};
use fundusq::datasets::{DatasetManifest, FundusRecord};
use fundusq::imaging::{ImageTensor, PreprocessConfig};
use fundusq::qmodel::{build_model, BackboneKind, HeadKind, ModelConfig};
use fundusq::service::{router, AppState, ManualClock, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Harness {
    _dir: tempfile::TempDir,
    clock: Arc<ManualClock>,
    app: axum::Router,
}

fn harness(with_queue: bool, with_model: bool) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let queue = DatasetManifest::new(
        "queue",
        ["a", "b", "c"]
            .iter()
            .map(|id| FundusRecord::new(*id, format!("{id}.png"), "clinic"))
            .collect(),
    );
    queue.save(dir.path().join("queue.jsonl")).unwrap();
    let config = ServiceConfig {
        scale: Some("builtin".into()),
        queue_manifest: with_queue.then(|| dir.path().join("queue.jsonl")),
        annotation_log: dir.path().join("log.jsonl"),
        cam_dir: dir.path().join("cams"),
        lease_seconds: 60,
        ..ServiceConfig::default()
    };
    let clock = Arc::new(ManualClock::new(
        Utc.with_ymd_and_hms(2025, 1, 1, 8, 0, 0).unwrap(),
    ));
    let mut state = AppState::from_config(config, clock.clone()).unwrap();
    if with_model {
        let cfg = ModelConfig::new(BackboneKind::SmallCnnTest, HeadKind::Regress1, 32).with_seed(4);
        let model = build_model(&cfg, &PreprocessConfig::with_target_size(32)).unwrap();
        state = state.with_model(model, "test-model");
    }
    Harness {
        _dir: dir,
        clock,
        app: router(Arc::new(state)),
    }
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), 1 << 24)
        .await
        .unwrap();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

fn post_json(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn next(grader: &str) -> Request<Body> {
    Request::get("/v1/annotation/next")
        .header("x-grader-id", grader)
        .body(Body::empty())
        .unwrap()
}

fn png_bytes() -> Vec<u8> {
    let mut data = vec![0.0f32; 48 * 48 * 3];
    for y in 8..40 {
        for x in 8..40 {
            let i = (y * 48 + x) * 3;
            data[i..i + 3].copy_from_slice(&[180.0, 90.0 + x as f32, 40.0]);
        }
    }
    let img = ImageTensor::new(48, 48, data, false).unwrap().to_rgb8();
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn score_request(bytes: &[u8], query: &str) -> Request<Body> {
    let mut body =
        b"--XB\r\nContent-Disposition: form-data; name=\"image\"; filename=\"f.png\"\r\n\r\n"
            .to_vec();
    body.extend_from_slice(bytes);
    body.extend_from_slice(b"\r\n--XB--\r\n");
    Request::post(format!("/v1/score{query}"))
        .header("content-type", "multipart/form-data; boundary=XB")
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn health_and_scale() {
    let h = harness(true, false);
    let res = h
        .app
        .clone()
        .oneshot(Request::get("/v1/health").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let res = h
        .app
        .clone()
        .oneshot(
            Request::get("/v1/reference-scale")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(res.headers()["x-scale-version"], "1.0");
}

#[tokio::test]
async fn score_requires_model() {
    let h = harness(true, false);
    let (status, body) = send(&h.app, score_request(&png_bytes(), "")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn score_with_cam_artifact() {
    let h = harness(true, true);
    let (status, body) = send(&h.app, score_request(&png_bytes(), "?cam=true&threshold=1")).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["label"], "good");
    assert_eq!(body["model_version"], "test-model");
    let uri = body["cam_uri"].as_str().unwrap();
    let res = h
        .app
        .clone()
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "image/png");

    let (status, _) = send(&h.app, score_request(&png_bytes(), "?threshold=11")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&h.app, score_request(b"not an image", "")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let black = {
        let img = ImageTensor::filled(40, 40, [0.0; 3]).unwrap().to_rgb8();
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    };
    let (status, _) = send(&h.app, score_request(&black, "")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn cam_names_are_sanitized() {
    let h = harness(false, false);
    let res = h
        .app
        .clone()
        .oneshot(
            Request::get("/v1/cam/..%2Fqueue.jsonl")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);
    let res = h
        .app
        .clone()
        .oneshot(
            Request::get("/v1/cam/missing.png")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn leases_expire_and_are_exclusive() {
    let h = harness(true, false);
    let (_, t1) = send(&h.app, next("g1")).await;
    let (_, t2) = send(&h.app, next("g2")).await;
    assert_eq!(t1["image_id"], "a");
    assert_eq!(t2["image_id"], "b");
    // same grader gets the same task back
    let (_, again) = send(&h.app, next("g1")).await;
    assert_eq!(again["image_id"], "a");

    h.clock.advance(Duration::seconds(61));
    let (_, t3) = send(&h.app, next("g3")).await;
    assert_eq!(t3["image_id"], "a");

    let missing = Request::get("/v1/annotation/next")
        .body(Body::empty())
        .unwrap();
    assert_eq!(send(&h.app, missing).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn submission_rules() {
    let h = harness(true, false);
    let sub = |id: &str, image: &str, score: f64| json!({"record_id": id, "image_id": image, "grader_id": "g1", "score": score, "scale_version": "1.0"});
    assert_eq!(
        send(&h.app, post_json("/v1/annotation", sub("r1", "a", 7.5)))
            .await
            .0,
        StatusCode::CREATED
    );
    assert_eq!(
        send(&h.app, post_json("/v1/annotation", sub("r1", "a", 7.5)))
            .await
            .0,
        StatusCode::OK
    );
    assert_eq!(
        send(&h.app, post_json("/v1/annotation", sub("r1", "a", 3.0)))
            .await
            .0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        send(&h.app, post_json("/v1/annotation", sub("r2", "zz", 3.0)))
            .await
            .0,
        StatusCode::CONFLICT
    );

    let (status, body) = send(&h.app, post_json("/v1/annotation", sub("r3", "b", 7.25))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["violations"][0]["kind"], "off_grid");
    let mut stale = sub("r4", "b", 7.0);
    stale["scale_version"] = json!("0.1");
    let (status, body) = send(&h.app, post_json("/v1/annotation", stale)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["violations"][0]["kind"], "version");

    // annotated images leave the queue
    let (_, task) = send(&h.app, next("g9")).await;
    assert_eq!(task["image_id"], "b");
    assert_eq!(task["remaining"], 2);
}

#[tokio::test]
async fn queue_drains_to_no_content() {
    let h = harness(true, false);
    for (i, id) in ["a", "b", "c"].iter().enumerate() {
        let body = json!({"image_id": id, "grader_id": "g1", "score": 5.0 + i as f64, "scale_version": "1.0"});
        assert_eq!(
            send(&h.app, post_json("/v1/annotation", body)).await.0,
            StatusCode::CREATED
        );
    }
    let res = h.app.clone().oneshot(next("g1")).await.unwrap();
    assert_eq!(res.status(), StatusCode::NO_CONTENT);
}
