//! Drives the HTTP service in-process: fetch the reference scale, lease an
//! annotation task, submit a grade and export the labels.
//!
//! cargo run --example annotation_service

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use fundusq::datasets::{DatasetManifest, FundusRecord};
use fundusq::service::{router, AppState, ServiceConfig, SystemClock};
use tower::ServiceExt;

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, String) {
    let res = app.clone().oneshot(req).await.expect("infallible");
    let status = res.status();
    let body = axum::body::to_bytes(res.into_body(), 1 << 20)
        .await
        .expect("body");
    (status, String::from_utf8_lossy(&body).into_owned())
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let queue = DatasetManifest::new(
        "queue",
        (0..3)
            .map(|i| FundusRecord::new(format!("img-{i}"), format!("img-{i}.png"), "clinic"))
            .collect(),
    );
    queue.save(dir.path().join("queue.jsonl"))?;
    let config = ServiceConfig {
        scale: Some("builtin".into()),
        queue_manifest: Some(dir.path().join("queue.jsonl")),
        annotation_log: dir.path().join("annotations.jsonl"),
        ..ServiceConfig::default()
    };
    let app = router(Arc::new(AppState::from_config(
        config,
        Arc::new(SystemClock),
    )?));

    let (status, body) = call(
        &app,
        Request::get("/v1/reference-scale").body(Body::empty())?,
    )
    .await;
    println!("reference scale: {status}, {} bytes", body.len());

    let next = Request::get("/v1/annotation/next")
        .header("x-grader-id", "g1")
        .body(Body::empty())?;
    let (status, task) = call(&app, next).await;
    println!("next task: {status} {task}");
    let task: serde_json::Value = serde_json::from_str(&task)?;

    let submission = serde_json::json!({
        "image_id": task["image_id"],
        "grader_id": "g1",
        "score": 7.5,
        "scale_version": task["scale_version"],
    });
    let post = Request::post("/v1/annotation")
        .header("content-type", "application/json")
        .body(Body::from(submission.to_string()))?;
    let (status, body) = call(&app, post).await;
    println!("submit: {status} {body}");

    let (_, export) = call(
        &app,
        Request::get("/v1/annotation/export").body(Body::empty())?,
    )
    .await;
    println!("export:\n{export}");
    Ok(())
}
