use std::io::Cursor;
use std::path::Path;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use pyramidfill_core::trainer::{save_bundle, LevelBundle, PyramidModel, TrainConfig};
use pyramidfill_service::{router, AppState, ModelSpec, RegistryFile, ServiceConfig, ServiceError};
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_config(dir: &Path) -> TrainConfig {
    let text = format!(
        "dataset_root = {:?}\ncheckpoint_dir = {:?}\nlevels = 2\nbase_resolution = 16\n[widths]\ngenerator = 4\ndiscriminator = 4\n",
        dir.join("data"),
        dir.join("ck")
    );
    TrainConfig::from_toml(&text).unwrap()
}

fn write_checkpoints(dir: &Path) -> std::path::PathBuf {
    let cfg = tiny_config(dir);
    for level in 0..cfg.levels {
        save_bundle(&cfg, &LevelBundle::new(level, &cfg)).unwrap();
    }
    cfg.checkpoint_dir
}

fn ready_app(dir: &Path, config: ServiceConfig) -> Router {
    let model = PyramidModel::load(write_checkpoints(dir)).unwrap();
    router(AppState::with_models(config, vec![model]))
}

fn png(img: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    B64.encode(buf.into_inner())
}

fn png_gray(img: &GrayImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    B64.encode(buf.into_inner())
}

fn decode_png(s: &str) -> RgbImage {
    image::load_from_memory(&B64.decode(s).unwrap()).unwrap().to_rgb8()
}

fn test_image(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) * 3 % 256) as u8]))
}

fn square_hole(w: u32, h: u32) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let inside = x >= w / 4 && x < 3 * w / 4 && y >= h / 4 && y < 3 * h / 4;
        Luma([if inside { 255 } else { 0 }])
    })
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value: Value = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body: {bytes:?}"));
    (status, value)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(body: &Value) -> Request<Body> {
    Request::post("/v1/inpaint")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

#[tokio::test]
async fn health_and_model_listing_when_ready() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let (status, health) = call(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["ready"], true);
    assert_eq!(health["schema_version"], pyramidfill_service::SCHEMA_VERSION);

    let (status, models) = call(&app, get("/v1/models")).await;
    assert_eq!(status, StatusCode::OK);
    let list = models["models"].as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["levels"], 2);
    assert_eq!(list[0]["size_multiple"], 2);
    assert_eq!(list[0]["full_resolution"], 32);
    assert_eq!(list[0]["load_state"]["status"], "ready");
}

#[tokio::test]
async fn readiness_follows_model_loading() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoints(dir.path());
    let registry = RegistryFile {
        models: vec![ModelSpec {
            id: "tiny".into(),
            checkpoints: ck,
        }],
    };
    let state = AppState::new(ServiceConfig::default(), &registry);
    let app = router(state.clone());
    let (status, health) = call(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(health["ready"], false);
    assert_eq!(health["schema_version"], pyramidfill_service::SCHEMA_VERSION);

    let (status, err) = call(
        &app,
        post_json(&json!({"image": png(&test_image(8, 8)), "mask": png_gray(&square_hole(8, 8))})),
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{err}");

    let loader = state.clone();
    tokio::task::spawn_blocking(move || loader.load_all()).await.unwrap().unwrap();
    let (status, health) = call(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["models_loaded"], 1);
    let (_, models) = call(&app, get("/v1/models")).await;
    assert_eq!(models["models"][0]["model_id"], "tiny");
}

#[tokio::test]
async fn empty_registry_lists_nothing_and_is_ready_after_load() {
    let state = AppState::new(ServiceConfig::default(), &RegistryFile::default());
    state.load_all().unwrap();
    let app = router(state);
    let (_, models) = call(&app, get("/v1/models")).await;
    assert_eq!(models["models"].as_array().unwrap().len(), 0);
    let (status, _) = call(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    let (status, err) = call(
        &app,
        post_json(&json!({"image": png(&test_image(8, 8)), "mask": png_gray(&square_hole(8, 8))})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "unknown_model");
}

#[tokio::test]
async fn empty_mask_returns_input_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let img = test_image(32, 32);
    let mask = GrayImage::new(32, 32);
    let (status, body) = call(&app, post_json(&json!({"image": png(&img), "mask": png_gray(&mask)}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["content_type"], "image/png");
    assert_eq!(body["adjustment_mode"], "none");
    assert!(body["timing_ms"].as_f64().unwrap() >= 0.0);
    assert_eq!(decode_png(body["image"].as_str().unwrap()), img);
}

#[tokio::test]
async fn known_pixels_survive_inpainting() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let img = test_image(32, 32);
    let mask = square_hole(32, 32);
    let (status, body) = call(
        &app,
        post_json(&json!({"image": png(&img), "mask": png_gray(&mask), "return_intermediates": true})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let out = decode_png(body["image"].as_str().unwrap());
    assert_eq!(out.dimensions(), (32, 32));
    for (x, y, p) in out.enumerate_pixels() {
        if mask.get_pixel(x, y).0[0] == 0 {
            assert_eq!(p, img.get_pixel(x, y), "known pixel ({x}, {y}) changed");
        }
    }
    let inter = body["intermediates"].as_array().unwrap();
    assert_eq!(inter.len(), 2);
    assert_eq!((inter[0]["width"].as_u64(), inter[0]["height"].as_u64()), (Some(16), Some(16)));
    assert_eq!((inter[1]["width"].as_u64(), inter[1]["height"].as_u64()), (Some(32), Some(32)));
    assert_eq!(decode_png(inter[1]["image"].as_str().unwrap()).dimensions(), (32, 32));
}

#[tokio::test]
async fn odd_sizes_are_adjusted_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let img = test_image(33, 30);
    let mask = GrayImage::new(33, 30);
    let (status, body) = call(&app, post_json(&json!({"image": png(&img), "mask": png_gray(&mask)}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let adj = &body["adjustment"];
    assert_eq!(adj["original_width"], 33);
    assert_eq!(adj["width"], 34);
    assert_eq!(adj["height"], 30);
    assert_eq!(body["adjustment_mode"], "pad");
    let out = decode_png(body["image"].as_str().unwrap());
    assert_eq!(out.dimensions(), (34, 30));
    let ox = adj["offset_x"].as_i64().unwrap();
    for y in 0..30 {
        for x in 0..34i64 {
            let sx = (x + ox).clamp(0, 32) as u32;
            assert_eq!(out.get_pixel(x as u32, y), img.get_pixel(sx, y));
        }
    }
}

#[tokio::test]
async fn dimension_mismatch_is_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let (status, body) = call(
        &app,
        post_json(&json!({"image": png(&test_image(32, 32)), "mask": png_gray(&square_hole(16, 32))})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid_input");
    assert_eq!(body["schema_version"], pyramidfill_service::SCHEMA_VERSION);
    assert!(body["error"]["message"].as_str().unwrap().contains("16x32"));
}

#[tokio::test]
async fn malformed_rasters_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let (status, _) = call(&app, post_json(&json!({"image": "@@not base64@@", "mask": "AAAA"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(
        &app,
        post_json(&json!({"image": B64.encode(b"not an image"), "mask": png_gray(&square_hole(8, 8))})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, body) = call(&app, post_json(&json!({"picture": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "bad_request");
}

#[tokio::test]
async fn unknown_model_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let (status, body) = call(
        &app,
        post_json(&json!({
            "image": png(&test_image(8, 8)),
            "mask": png_gray(&square_hole(8, 8)),
            "model_id": "nope"
        })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_model");
    let (status, _) = call(&app, get("/v2/whatever")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oversized_payloads_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        payload_limit: 256,
        ..ServiceConfig::default()
    };
    let app = ready_app(dir.path(), config);
    let body = json!({"image": png(&test_image(64, 64)), "mask": png_gray(&square_hole(64, 64))});
    let bytes = serde_json::to_vec(&body).unwrap();
    assert!(bytes.len() > 256);

    let (status, err) = call(&app, post_json(&body)).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(err["error"]["code"], "payload_too_large");

    let declared = Request::post("/v1/inpaint")
        .header(header::CONTENT_TYPE, "application/json")
        .header(header::CONTENT_LENGTH, bytes.len())
        .body(Body::from(bytes))
        .unwrap();
    let (status, _) = call(&app, declared).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

fn multipart_body(boundary: &str, parts: &[(&str, Option<&str>, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, filename, data) in parts {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match filename {
            Some(f) => out.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: image/png\r\n\r\n")
                    .as_bytes(),
            ),
            None => out.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes()),
        }
        out.extend_from_slice(data);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    out
}

#[tokio::test]
async fn multipart_requests_match_json_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = ready_app(dir.path(), ServiceConfig::default());
    let img = test_image(16, 16);
    let mask = square_hole(16, 16);
    let (_, via_json) = call(&app, post_json(&json!({"image": png(&img), "mask": png_gray(&mask)}))).await;

    let boundary = "pyramidfill-test-boundary";
    let body = multipart_body(
        boundary,
        &[
            ("image", Some("image.png"), B64.decode(png(&img)).unwrap()),
            ("mask", Some("mask.png"), B64.decode(png_gray(&mask)).unwrap()),
            ("model_id", None, b"ck".to_vec()),
        ],
    );
    let req = Request::post("/v1/inpaint")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let (status, via_form) = call(&app, req).await;
    assert_eq!(status, StatusCode::OK, "{via_form}");
    assert_eq!(via_form["model_id"], "ck");
    assert_eq!(via_form["image"], via_json["image"]);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        max_concurrency: 2,
        ..ServiceConfig::default()
    };
    let app = ready_app(dir.path(), config);
    let body = json!({"image": png(&test_image(32, 32)), "mask": png_gray(&square_hole(32, 32))});
    let tasks: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            let req = post_json(&body);
            tokio::spawn(async move { call(&app, req).await })
        })
        .collect();
    let mut images = Vec::new();
    for t in tasks {
        let (status, body) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        images.push(body["image"].as_str().unwrap().to_string());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}

fn snapshot(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for level in std::fs::read_dir(dir).unwrap() {
        let level = level.unwrap().path();
        for f in std::fs::read_dir(&level).unwrap() {
            let f = f.unwrap().path();
            out.push((f.clone(), std::fs::read(&f).unwrap()));
        }
    }
    out.sort();
    out
}

#[tokio::test]
async fn serving_leaves_checkpoints_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoints(dir.path());
    let before = snapshot(&ck);
    let state = AppState::new(
        ServiceConfig::default(),
        &RegistryFile {
            models: vec![ModelSpec {
                id: "m".into(),
                checkpoints: ck.clone(),
            }],
        },
    );
    state.load_all().unwrap();
    let app = router(state);
    let (status, _) = call(
        &app,
        post_json(&json!({"image": png(&test_image(32, 32)), "mask": png_gray(&square_hole(32, 32))})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(snapshot(&ck), before);
}

#[tokio::test]
async fn unloadable_checkpoint_stops_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let registry = RegistryFile {
        models: vec![ModelSpec {
            id: "missing".into(),
            checkpoints: dir.path().join("does-not-exist"),
        }],
    };
    let state = AppState::new(ServiceConfig::default(), &registry);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let result = tokio::time::timeout(
        std::time::Duration::from_secs(30),
        pyramidfill_service::run(listener, state.clone(), std::future::pending()),
    )
    .await
    .expect("server should stop on load failure");
    match result {
        Err(ServiceError::Load(msg)) => assert!(msg.contains("missing"), "{msg}"),
        other => panic!("expected a load failure, got {other:?}"),
    }
    assert!(!state.is_ready());
}

#[tokio::test]
async fn server_shuts_down_gracefully() {
    let state = AppState::new(ServiceConfig::default(), &RegistryFile::default());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(pyramidfill_service::run(listener, state.clone(), async move {
        let _ = rx.await;
    }));
    for _ in 0..100 {
        if state.is_ready() {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    assert!(state.is_ready());
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}

#[test]
fn registry_file_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("models.toml");
    std::fs::write(&path, "[[models]]\nid = \"a\"\ncheckpoints = \"ck/a\"\n").unwrap();
    let reg = RegistryFile::load(&path).unwrap();
    assert_eq!(reg.models[0].checkpoints, dir.path().join("ck/a"));
    std::fs::write(&path, "[[models]]\nid = \"a\"\n").unwrap();
    assert!(RegistryFile::load(&path).is_err());
}
