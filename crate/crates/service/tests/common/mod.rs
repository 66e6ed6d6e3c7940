#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use alarm::{router, Engine, ServiceConfig};
use alarm_core::{DatasetTable, Feature, FeatureSchema, Point, Value};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};
use tower::ServiceExt;

/// Inliers spread over ordinary amounts; anomalies are large `UVER` payments.
pub fn transactions(inliers: usize, anomalies: usize, seed: u64) -> DatasetTable {
    let schema = FeatureSchema::new(vec![
        Feature::real("amount"),
        Feature::real("balance"),
        Feature::real("fee"),
        Feature::categorical("k_symbol", ["UVER", "POJISTNE", "SIPO", "SLUZBY"]),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = ["POJISTNE", "SIPO", "SLUZBY"];
    let mut rows = Vec::new();
    for _ in 0..inliers {
        rows.push(Point::new(vec![
            Value::Real(rng.random_range(100.0..3000.0)),
            Value::Real(rng.random_range(1000.0..50000.0)),
            Value::Real(rng.random_range(0.0..15.0)),
            Value::Cat(common[rng.random_range(0..3)].into()),
        ]));
    }
    for _ in 0..anomalies {
        rows.push(Point::new(vec![
            Value::Real(rng.random_range(8000.0..9000.0)),
            Value::Real(rng.random_range(1000.0..50000.0)),
            Value::Real(rng.random_range(0.0..15.0)),
            Value::Cat("UVER".into()),
        ]));
    }
    DatasetTable::new(schema, rows, None).unwrap()
}

pub fn engine(dir: &std::path::Path) -> Arc<Engine> {
    let config = ServiceConfig {
        data_dir: dir.join("data"),
        rule_db: dir.join("data/rules.jsonl"),
        ..ServiceConfig::default()
    };
    Arc::new(Engine::open(config).unwrap())
}

pub fn multipart(fields: &[(&str, &str)]) -> (String, String) {
    let boundary = "alarm-test-boundary".to_owned();
    let mut body = String::new();
    for (name, value) in fields {
        body.push_str(&format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\r\n{value}\r\n"
        ));
    }
    body.push_str(&format!("--{boundary}--\r\n"));
    (format!("multipart/form-data; boundary={boundary}"), body)
}

pub async fn raw(app: &Router, req: Request<Body>) -> (StatusCode, String) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Json>) -> (StatusCode, Json) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let (status, text) = raw(app, req).await;
    (
        status,
        serde_json::from_str(&text).unwrap_or(Json::String(text)),
    )
}

pub async fn upload(app: &Router, table: &DatasetTable) -> String {
    let (ct, body) = multipart(&[
        ("csv", &table.to_csv_string()),
        ("schema", &table.schema().to_json()),
    ]);
    let req = Request::post("/datasets")
        .header("content-type", ct)
        .body(Body::from(body))
        .unwrap();
    let (status, text) = raw(app, req).await;
    assert_eq!(status, StatusCode::CREATED, "{text}");
    let v: Json = serde_json::from_str(&text).unwrap();
    v["dataset_id"].as_str().unwrap().to_owned()
}

/// Start a run and wait for it to finish fitting.
pub async fn fitted_run(app: &Router, request: Json) -> String {
    let (status, info) = call(app, "POST", "/runs", Some(request)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{info}");
    let id = info["run_id"].as_str().unwrap().to_owned();
    for _ in 0..2000 {
        let (_, info) = call(app, "GET", &format!("/runs/{id}"), None).await;
        match info["status"].as_str().unwrap() {
            "done" => return id,
            "failed" => panic!("run failed: {info}"),
            _ => tokio::time::sleep(Duration::from_millis(10)).await,
        }
    }
    panic!("run {id} did not finish");
}

pub fn small_run(dataset_id: &str) -> Json {
    json!({ "dataset_id": dataset_id, "chains": 40, "depth": 10, "seed": 7 })
}

pub fn app(dir: &std::path::Path) -> Router {
    router(engine(dir))
}
