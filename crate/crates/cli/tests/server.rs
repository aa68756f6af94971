//! HTTP API behaviour through the axum router.

mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use common::{fixture, Fixture};
use keymorph_cli::server::{router, AppState};
use keymorph_core::detector::DetectorWeights;
use keymorph_core::transforms::TransformParams;

fn app(f: &Fixture) -> axum::Router {
    let w = DetectorWeights::load(&f.weights).unwrap();
    router(Arc::new(AppState::new(w, &f.dataset).unwrap()), None)
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &axum::Router, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    send(app, req).await
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn health_reports_the_model_fingerprint() {
    let f = fixture();
    let (status, body) = get(&app(&f), "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model"], DetectorWeights::load(&f.weights).unwrap().fingerprint());
}

#[tokio::test]
async fn subjects_and_images() {
    let f = fixture();
    let app = app(&f);
    let v = json(&get(&app, "/api/subjects").await.1);
    assert_eq!(v["subjects"].as_array().unwrap().len(), 4);
    assert_eq!(v["modalities"], 3);
    for m in ["0", "2", "labels"] {
        let (status, png) = get(&app, &format!("/api/image/s0000/{m}")).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(&png[1..4], b"PNG");
    }
    assert_eq!(get(&app, "/api/image/s0000/7").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/image/nobody/0").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/image/s0000/x").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn keypoints_match_direct_detection() {
    let f = fixture();
    let w = DetectorWeights::load(&f.weights).unwrap();
    let body = get(&app(&f), "/api/keypoints/s0001/1").await.1;
    #[derive(serde::Deserialize)]
    struct Raw<'a> {
        #[serde(borrow)]
        keypoints: &'a serde_json::value::RawValue,
    }
    let raw: Raw = serde_json::from_slice(&body).unwrap();
    let img = keymorph_core::warp::Image::load(f.subject_file("s0001", "mod1.kmt")).unwrap();
    let direct = w.detect(&img).unwrap();
    assert_eq!(raw.keypoints.get(), serde_json::to_string(&direct).unwrap());
}

#[tokio::test]
async fn register_errors_map_to_status_codes() {
    let f = fixture();
    let app = app(&f);
    assert_eq!(post(&app, "/api/register", "{not json").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/api/register", r#"{"moving":"s0000"}"#).await.0, StatusCode::BAD_REQUEST);
    let neg = r#"{"moving":"s0000","fixed":"s0001","transform":"tps","lambda":-1}"#;
    assert_eq!(post(&app, "/api/register", neg).await.0, StatusCode::BAD_REQUEST);
    let unknown = r#"{"moving":"s0000","fixed":"ghost"}"#;
    assert_eq!(post(&app, "/api/register", unknown).await.0, StatusCode::NOT_FOUND);
    // A blank image collapses every keypoint onto the centroid.
    let (status, body) = post(&app, "/api/register", r#"{"moving":"s0001","fixed":"flat"}"#).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(json(&body)["error"].as_str().unwrap().contains("degenerate"));
}

#[tokio::test]
async fn register_transform_is_byte_identical_to_the_cli() {
    let f = fixture();
    let body = r#"{"moving":"s0000","fixed":"s0002","modality_m":1,"modality_f":0,"transform":"tps","lambda":0.1}"#;
    let (status, bytes) = post(&app(&f), "/api/register", body).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&bytes);
    #[derive(serde::Deserialize)]
    struct Raw<'a> {
        #[serde(borrow)]
        transform: &'a serde_json::value::RawValue,
    }
    let raw: Raw = serde_json::from_slice(&bytes).unwrap();
    let out = f.path("cli");
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_keymorph"))
        .args(["register", "--weights"])
        .arg(&f.weights)
        .arg("--moving")
        .arg(f.subject_file("s0000", "mod1.kmt"))
        .arg("--fixed")
        .arg(f.subject_file("s0002", "mod0.kmt"))
        .args(["--transform", "tps", "--lambda", "0.1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cli = std::fs::read_to_string(out.join("transform.json")).unwrap();
    assert_eq!(raw.transform.get(), cli);
    let parsed: TransformParams = serde_json::from_str(&cli).unwrap();
    assert_eq!(parsed.lambda(), Some(0.1));
    assert!(v["frame"].as_str().unwrap().starts_with("/api/warped?"));
    assert!(v["dice"]["mean"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn warped_frames_in_both_formats() {
    let f = fixture();
    let app = app(&f);
    let q = "/api/warped?moving=s0000&fixed=s0001&transform=affine";
    let (status, png) = get(&app, q).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (status, kmt) = get(&app, &format!("{q}&format=kmt")).await;
    assert_eq!(status, StatusCode::OK);
    let (t, _) = keymorph_core::io::decode_kmt(&kmt).unwrap();
    assert_eq!(t.shape(), &common::SHAPE);
    assert_eq!(get(&app, &format!("{q}&format=gif")).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn sweep_shares_keypoints_across_lambdas() {
    let f = fixture();
    let (status, bytes) = get(&app(&f), "/api/sweep?moving=s0000&fixed=s0001&lambdas=0,0.01,0.1,1,10").await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&bytes);
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 5);
    for e in entries {
        assert_eq!(e["moving_keypoints"], entries[0]["moving_keypoints"]);
        assert_eq!(e["fixed_keypoints"], entries[0]["fixed_keypoints"]);
    }
    assert!(entries[0]["control_point_residual"].as_f64().unwrap() < 1e-6);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_agree() {
    let f = fixture();
    let app = app(&f);
    let body = r#"{"moving":"s0001","fixed":"s0002","transform":"tps","lambda":1}"#;
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { post(&app, "/api/register", body).await })
        })
        .collect();
    let mut transforms = Vec::new();
    for h in handles {
        let (status, bytes) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        transforms.push(json(&bytes)["transform"].clone());
    }
    assert!(transforms.iter().all(|t| *t == transforms[0]));
}

#[tokio::test]
async fn static_files_are_served_at_root() {
    let f = fixture();
    let site = f.path("site");
    std::fs::create_dir_all(&site).unwrap();
    std::fs::write(site.join("index.html"), "<html>explorer</html>").unwrap();
    let w = DetectorWeights::load(&f.weights).unwrap();
    let app = router(Arc::new(AppState::new(w, &f.dataset).unwrap()), Some(&site));
    let (status, body) = get(&app, "/").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>explorer</html>");
    assert_eq!(get(&app, "/api/health").await.0, StatusCode::OK);
}
