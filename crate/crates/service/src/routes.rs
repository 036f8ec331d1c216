use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lostgan_core::dataset::tensor_to_images;
use lostgan_core::generator::GeneratorOutput;
use lostgan_core::isla::semantic_map;
use lostgan_core::layout::{parse_layout_value, sample_style_dims};
use lostgan_core::{Lattice, Layout, StyleState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codec::{base64_png, category_palette, decode_vector, StyleWire};
use crate::error::ApiError;
use crate::{AppState, Model, API_VERSION};

const MAX_INTERPOLATION_STEPS: usize = 64;
/// Fresh seeds stay below 2^53 so that JSON clients read them exactly.
const SEED_MASK: u64 = (1 << 53) - 1;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/categories", get(categories))
        .route("/v1/model", get(model_info))
        .route("/v1/generate", post(generate))
        .route("/v1/restyle", post(restyle))
        .route("/v1/interpolate", post(interpolate))
        .route("/v1/debug/affine_maps", post(affine_maps))
        .with_state(state)
}

fn model(state: &AppState) -> Result<Arc<Model>, ApiError> {
    state.model.clone().ok_or_else(ApiError::not_loaded)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("MalformedDocument", e.to_string()))
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({"status": "ok", "model_loaded": state.model.is_some()}))
}

async fn categories(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let m = model(&state)?;
    let names = m.categories.names();
    Ok(Json(json!({
        "version": API_VERSION,
        "categories": names,
        "background_index": m.categories.background_index(),
        "palette": category_palette(names.len()),
    })))
}

async fn model_info(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let m = model(&state)?;
    let cfg = m.generator.config();
    Ok(Json(json!({
        "version": API_VERSION,
        "resolution": cfg.output_side(),
        "checkpoint_hash": m.meta.generator_hash,
        "step": m.meta.step,
        "num_categories": m.categories.len(),
        "d_img": cfg.d_img,
        "d_obj": cfg.d_noise,
        "max_objects": m.limits.max_objects,
        "config": cfg,
    })))
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Options {
    #[serde(default)]
    return_mask_map: bool,
    #[serde(default)]
    resolution: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    layout: Value,
    #[serde(default)]
    style: Option<StyleWire>,
    #[serde(default)]
    options: Options,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RestyleRequest {
    layout: Value,
    style: StyleWire,
    #[serde(default)]
    resample: Vec<usize>,
    #[serde(default)]
    resample_image: bool,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    options: Options,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterpolateRequest {
    layout: Value,
    #[serde(default)]
    style: Option<StyleWire>,
    index: usize,
    z_a: String,
    z_b: String,
    steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineMapsRequest {
    layout: Value,
    #[serde(default)]
    style: Option<StyleWire>,
    #[serde(default)]
    sites: Option<Vec<String>>,
}

#[derive(Debug, Serialize)]
struct SemanticMapWire {
    width: usize,
    height: usize,
    background_index: usize,
    /// Row-major category index per pixel.
    labels: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct GenerateResponse {
    version: u32,
    width: usize,
    height: usize,
    image_png: String,
    style: StyleWire,
    #[serde(skip_serializing_if = "Option::is_none")]
    resample_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    semantic_map: Option<SemanticMapWire>,
}

/// Validated layout re-targeted to the model lattice, plus any style given
/// inside the document.
fn resolve_layout(m: &Model, doc: Value) -> Result<(Layout, Option<StyleWire>), ApiError> {
    let (layout, style) = parse_layout_value(doc, &m.categories)?;
    layout.validate(&m.categories, &m.limits)?;
    let side = m.generator.config().output_side();
    let wire = style.map(|s| StyleWire {
        seed: s.seed,
        z_img: s.z_img.as_deref().map(crate::codec::encode_vector),
        z_obj: s
            .z_obj
            .as_ref()
            .map(|rows| rows.iter().map(|r| crate::codec::encode_vector(r)).collect()),
    });
    Ok((Layout::new(Lattice::square(side), layout.objects), wire))
}

fn fresh_seed(state: &AppState) -> u64 {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    let k = state.seed_counter.fetch_add(1, Ordering::Relaxed);
    (nanos ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15)) & SEED_MASK
}

/// Explicit vectors win over a seed; request style wins over document
/// style; with neither a fresh seed is drawn.
fn resolve_style(
    state: &AppState,
    m: &Model,
    layout: &Layout,
    candidates: [Option<&StyleWire>; 2],
) -> Result<StyleState, ApiError> {
    let cfg = m.generator.config();
    let style = 'found: {
        for c in candidates.iter().flatten() {
            if let Some(s) = c.explicit()? {
                break 'found s;
            }
            if let Some(seed) = c.seed {
                break 'found sample_style_dims(layout.len(), cfg.d_img, cfg.d_noise, seed);
            }
        }
        sample_style_dims(layout.len(), cfg.d_img, cfg.d_noise, fresh_seed(state))
    };
    style.check(layout.len(), cfg.d_img, cfg.d_noise)?;
    Ok(style)
}

fn check_resolution(m: &Model, opts: &Options) -> Result<(), ApiError> {
    let side = m.generator.config().output_side();
    match opts.resolution {
        Some(r) if r != side => Err(ApiError::bad_request(
            "UnsupportedResolution",
            format!("model generates {side}x{side}, requested {r}"),
        )),
        _ => Ok(()),
    }
}

/// Runs `f` on the blocking pool behind the generation semaphore.
async fn run_blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|_| ApiError::internal("generation queue closed"))?;
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))?
}

fn render(
    m: &Model,
    layout: &Layout,
    out: &GeneratorOutput,
    style: &StyleState,
    mask_map: bool,
    resample_seed: Option<u64>,
) -> Result<GenerateResponse, ApiError> {
    let images = tensor_to_images(&out.image)?;
    let img = images.first().ok_or_else(|| ApiError::internal("empty generator output"))?;
    let semantic = if mask_map {
        let bg = m.categories.background_index();
        Some(SemanticMapWire {
            width: layout.lattice.width,
            height: layout.lattice.height,
            background_index: bg,
            labels: semantic_map(&out.masks, layout, bg)?,
        })
    } else {
        None
    };
    Ok(GenerateResponse {
        version: API_VERSION,
        width: img.width() as usize,
        height: img.height() as usize,
        image_png: base64_png(img)?,
        style: StyleWire::from_state(style),
        resample_seed,
        semantic_map: semantic,
    })
}

fn with_latency(body: impl Serialize, started: Instant) -> Response {
    let mut headers = HeaderMap::new();
    let ms = format!("{:.3}", started.elapsed().as_secs_f64() * 1e3);
    if let Ok(v) = HeaderValue::from_str(&ms) {
        headers.insert("x-generation-ms", v);
    }
    (headers, Json(body)).into_response()
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let started = Instant::now();
    let m = model(&state)?;
    let req: GenerateRequest = parse_body(&body)?;
    check_resolution(&m, &req.options)?;
    let (layout, doc_style) = resolve_layout(&m, req.layout)?;
    let style = resolve_style(&state, &m, &layout, [req.style.as_ref(), doc_style.as_ref()])?;
    let mask_map = req.options.return_mask_map;
    let resp = run_blocking(&state, move || {
        let out = m.generator.generate(&layout, &style)?;
        render(&m, &layout, &out, &style, mask_map, None)
    })
    .await?;
    Ok(with_latency(resp, started))
}

async fn restyle(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let started = Instant::now();
    let m = model(&state)?;
    let req: RestyleRequest = parse_body(&body)?;
    check_resolution(&m, &req.options)?;
    let (layout, _) = resolve_layout(&m, req.layout)?;
    let prior = req
        .style
        .explicit()?
        .ok_or_else(|| ApiError::bad_request("MalformedStyle", "restyle needs the explicit style echo"))?;
    let cfg = m.generator.config();
    prior.check(layout.len(), cfg.d_img, cfg.d_noise)?;
    if let Some(&i) = req.resample.iter().find(|&&i| i >= layout.len()) {
        return Err(lostgan_core::Error::IndexOutOfRange {
            index: i,
            len: layout.len(),
        }
        .into());
    }
    let changes = !req.resample.is_empty() || req.resample_image;
    let seed = req.seed.unwrap_or_else(|| fresh_seed(&state));
    let mut style = prior.clone();
    if changes {
        let fresh = sample_style_dims(layout.len(), cfg.d_img, cfg.d_noise, seed);
        for &i in &req.resample {
            style.z_obj[i] = fresh.z_obj[i].clone();
        }
        if req.resample_image {
            style.z_img = fresh.z_img;
        }
        style.seed = None;
    }
    let mask_map = req.options.return_mask_map;
    let resample_seed = changes.then_some(seed);
    let resp = run_blocking(&state, move || {
        let out = m.generator.generate(&layout, &style)?;
        render(&m, &layout, &out, &style, mask_map, resample_seed)
    })
    .await?;
    Ok(with_latency(resp, started))
}

#[derive(Debug, Serialize)]
struct Frame {
    t: f64,
    image_png: String,
}

async fn interpolate(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let started = Instant::now();
    let m = model(&state)?;
    let req: InterpolateRequest = parse_body(&body)?;
    let (layout, doc_style) = resolve_layout(&m, req.layout)?;
    let style = resolve_style(&state, &m, &layout, [req.style.as_ref(), doc_style.as_ref()])?;
    if req.steps < 2 || req.steps > MAX_INTERPOLATION_STEPS {
        return Err(ApiError::bad_request(
            "InvalidSteps",
            format!("steps must be in [2, {MAX_INTERPOLATION_STEPS}], got {}", req.steps),
        ));
    }
    let (z_a, z_b) = (decode_vector(&req.z_a)?, decode_vector(&req.z_b)?);
    let (index, steps) = (req.index, req.steps);
    let echo = StyleWire::from_state(&style);
    let frames = run_blocking(&state, move || {
        m.generator
            .interpolate_object_style(&layout, &style, index, &z_a, &z_b, steps)?
            .iter()
            .map(|(t, out)| {
                let img = tensor_to_images(&out.image)?;
                Ok(Frame {
                    t: *t,
                    image_png: base64_png(&img[0])?,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()
    })
    .await?;
    Ok(with_latency(
        json!({"version": API_VERSION, "index": index, "style": echo, "frames": frames}),
        started,
    ))
}

#[derive(Debug, Serialize)]
struct SiteWire {
    site: String,
    height: usize,
    width: usize,
    channels: usize,
    /// Channel-major `C × H × W`.
    gamma: Vec<f32>,
    beta: Vec<f32>,
    /// Boxes covering each cell, row-major.
    coverage: Vec<u32>,
}

async fn affine_maps(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let started = Instant::now();
    let m = model(&state)?;
    let req: AffineMapsRequest = parse_body(&body)?;
    let (layout, doc_style) = resolve_layout(&m, req.layout)?;
    let style = resolve_style(&state, &m, &layout, [req.style.as_ref(), doc_style.as_ref()])?;
    let wanted = req.sites;
    let echo = StyleWire::from_state(&style);
    let sites = run_blocking(&state, move || {
        let out = m.generator.generate_with(&layout, &style, true)?;
        out.maps
            .iter()
            .filter(|s| wanted.as_ref().is_none_or(|w| w.contains(&s.site)))
            .map(|s| {
                let f32s = |t: &lostgan_core::Tensor| -> Result<Vec<f32>, ApiError> {
                    Ok(t.flatten_all()
                        .and_then(|t| t.to_dtype(lostgan_core::DType::F32))
                        .and_then(|t| t.to_vec1::<f32>())
                        .map_err(lostgan_core::Error::from)?)
                };
                let channels = s.maps.gamma.dims()[1];
                Ok(SiteWire {
                    site: s.site.clone(),
                    height: s.height,
                    width: s.width,
                    channels,
                    gamma: f32s(&s.maps.gamma)?,
                    beta: f32s(&s.maps.beta)?,
                    coverage: s.maps.coverage.clone(),
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()
    })
    .await?;
    Ok(with_latency(
        json!({"version": API_VERSION, "style": echo, "sites": sites}),
        started,
    ))
}
