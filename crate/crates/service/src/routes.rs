use std::io::Cursor;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{DynamicImage, ImageFormat, RgbImage};
use pyramidfill_core::mask::Mask;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::pipeline::{inpaint_raster, validate_inputs, Adjustment};
use crate::state::{AppState, LoadState, ModelInfo};
use crate::SCHEMA_VERSION;

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.payload_limit;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(list_models))
        .route("/v1/inpaint", post(inpaint))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::NotFound("no such endpoint".into())
}

#[derive(Serialize)]
struct Health {
    schema_version: &'static str,
    status: &'static str,
    ready: bool,
    models_loaded: usize,
    models_total: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let models = state.list();
    let ready = state.is_ready();
    let failed = models.iter().any(|m| matches!(m.load_state, LoadState::Failed(_)));
    let body = Health {
        schema_version: SCHEMA_VERSION,
        status: if ready {
            "ready"
        } else if failed {
            "failed"
        } else {
            "loading"
        },
        ready,
        models_loaded: models.iter().filter(|m| m.load_state == LoadState::Ready).count(),
        models_total: models.len(),
    };
    let code = if ready {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (code, Json(body)).into_response()
}

#[derive(Serialize)]
struct ModelList {
    schema_version: &'static str,
    models: Vec<ModelInfo>,
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<ModelList> {
    Json(ModelList {
        schema_version: SCHEMA_VERSION,
        models: state.list(),
    })
}

/// JSON envelope of `POST /v1/inpaint`. Rasters are base64, optionally as data URLs.
#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub return_intermediates: bool,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct Intermediate {
    pub level: usize,
    pub width: u32,
    pub height: u32,
    pub image: String,
}

#[derive(Debug, Serialize)]
pub struct InpaintResponse {
    pub schema_version: &'static str,
    pub model_id: String,
    pub content_type: &'static str,
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub adjustment: Adjustment,
    pub adjustment_mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intermediates: Option<Vec<Intermediate>>,
    pub timing_ms: f64,
}

struct Payload {
    image: Vec<u8>,
    mask: Vec<u8>,
    model_id: Option<String>,
    return_intermediates: bool,
}

fn payload_error(status: StatusCode, message: String, limit: usize) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::PayloadTooLarge(limit)
    } else {
        ApiError::BadRequest(message)
    }
}

async fn read_payload(state: &Arc<AppState>, req: Request) -> Result<Payload, ApiError> {
    let limit = state.config.payload_limit;
    let declared = req
        .headers()
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > limit) {
        return Err(ApiError::PayloadTooLarge(limit));
    }
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let mut mp = Multipart::from_request(req, state)
            .await
            .map_err(|e| payload_error(e.status(), e.body_text(), limit))?;
        let (mut image, mut mask, mut model_id, mut inter) = (None, None, None, false);
        while let Some(field) = mp
            .next_field()
            .await
            .map_err(|e| payload_error(e.status(), e.body_text(), limit))?
        {
            let name = field.name().unwrap_or_default().to_string();
            let data = field
                .bytes()
                .await
                .map_err(|e| payload_error(e.status(), e.body_text(), limit))?;
            match name.as_str() {
                "image" => image = Some(data.to_vec()),
                "mask" => mask = Some(data.to_vec()),
                "model_id" => model_id = Some(text_field(&data)?),
                "return_intermediates" => inter = parse_flag(&text_field(&data)?)?,
                other => return Err(ApiError::BadRequest(format!("unexpected form field {other:?}"))),
            }
        }
        Ok(Payload {
            image: image.ok_or_else(|| ApiError::Unprocessable("missing form field \"image\"".into()))?,
            mask: mask.ok_or_else(|| ApiError::Unprocessable("missing form field \"mask\"".into()))?,
            model_id: model_id.filter(|s| !s.is_empty()),
            return_intermediates: inter,
        })
    } else {
        let body = Bytes::from_request(req, state)
            .await
            .map_err(|e| payload_error(e.status(), e.body_text(), limit))?;
        let parsed: InpaintRequest = serde_json::from_slice(&body)
            .map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
        Ok(Payload {
            image: decode_b64(&parsed.image, "image")?,
            mask: decode_b64(&parsed.mask, "mask")?,
            model_id: parsed.model_id.filter(|s| !s.is_empty()),
            return_intermediates: parsed.return_intermediates,
        })
    }
}

fn text_field(data: &[u8]) -> Result<String, ApiError> {
    std::str::from_utf8(data)
        .map(|s| s.trim().to_string())
        .map_err(|_| ApiError::BadRequest("form text fields must be UTF-8".into()))
}

fn parse_flag(s: &str) -> Result<bool, ApiError> {
    match s.to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" => Ok(false),
        "1" | "true" | "yes" => Ok(true),
        _ => Err(ApiError::BadRequest(format!("not a boolean: {s:?}"))),
    }
}

fn decode_b64(s: &str, what: &str) -> Result<Vec<u8>, ApiError> {
    let s = s.trim();
    let data = match s.strip_prefix("data:") {
        Some(rest) => rest.split_once(',').map(|(_, d)| d).unwrap_or(""),
        None => s,
    };
    B64.decode(data)
        .map_err(|e| ApiError::Unprocessable(format!("{what} is not valid base64: {e}")))
}

fn decode_raster(bytes: &[u8], what: &str) -> Result<DynamicImage, ApiError> {
    image::load_from_memory(bytes).map_err(|e| ApiError::Unprocessable(format!("cannot decode {what}: {e}")))
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, ApiError> {
    Ok(decode_raster(bytes, "image")?.to_rgb8())
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask, ApiError> {
    Ok(Mask::from_gray_image(&decode_raster(bytes, "mask")?.to_luma8()))
}

pub fn encode_png(img: &RgbImage) -> Result<String, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ApiError::Internal(format!("cannot encode result: {e}")))?;
    Ok(B64.encode(buf.into_inner()))
}

async fn inpaint(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<InpaintResponse>, ApiError> {
    let started = Instant::now();
    let payload = read_payload(&state, req).await?;
    let image = decode_image(&payload.image)?;
    let mask = decode_mask(&payload.mask)?;
    validate_inputs(&image, &mask)?;

    let entry = state.lookup(payload.model_id.as_deref()).ok_or_else(|| {
        ApiError::UnknownModel(payload.model_id.clone().unwrap_or_else(|| "<default>".into()))
    })?;
    let model = match (&entry.state, &entry.model) {
        (LoadState::Ready, Some(m)) => m.clone(),
        (LoadState::Failed(msg), _) => return Err(ApiError::Internal(msg.clone())),
        _ => return Err(ApiError::NotReady(format!("model {} is still loading", entry.id))),
    };

    let _permit = state
        .limiter
        .acquire()
        .await
        .map_err(|_| ApiError::Internal("service is shutting down".into()))?;
    let with_inter = payload.return_intermediates;
    let result = tokio::task::spawn_blocking(move || inpaint_raster(&model, &image, &mask, with_inter))
        .await
        .map_err(|e| ApiError::Internal(format!("inference task failed: {e}")))??;

    let intermediates = if with_inter {
        let mut out = Vec::with_capacity(result.intermediates.len());
        for (level, img) in result.intermediates.iter().enumerate() {
            out.push(Intermediate {
                level,
                width: img.width(),
                height: img.height(),
                image: encode_png(img)?,
            });
        }
        Some(out)
    } else {
        None
    };
    Ok(Json(InpaintResponse {
        schema_version: SCHEMA_VERSION,
        model_id: entry.id,
        content_type: "image/png",
        width: result.image.width(),
        height: result.image.height(),
        image: encode_png(&result.image)?,
        adjustment: result.adjustment,
        adjustment_mode: result.adjustment.mode(),
        intermediates,
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}
