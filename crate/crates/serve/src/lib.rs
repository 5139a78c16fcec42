//! HTTP inference service.
//!
//! Endpoints:
//!
//! - `POST /erase`: image plus either a mask PNG or a [`StrokeSet`], as
//!   JSON with base64 PNGs or as `multipart/form-data`. Returns the erased
//!   image and optionally every iteration's prediction.
//! - `GET /health`: `{status, checkpoint_id}`; 503 until the checkpoint
//!   has loaded.
//! - `GET /model-info`: parameter count, `K`, `D` and checkpoint id.
//!
//! By default the response is composited: pixels outside the mask are the
//! input's bytes. `?raw=true` returns the clamped network output instead.

pub mod strokes;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use deeperaser::checkpoint;
use deeperaser::metrics::composite_non_text;
use deeperaser::model::{count_parameters, forward, ParamScope};
use deeperaser::{io, Model, Tensor};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub use strokes::{rasterize_strokes, Stroke, StrokeError, StrokeSet};

pub const ENV_CHECKPOINT: &str = "DEEPERASER_CHECKPOINT";
pub const ENV_PORT: &str = "DEEPERASER_PORT";
pub const ENV_STATIC_DIR: &str = "DEEPERASER_STATIC_DIR";
pub const ENV_CORS_ORIGIN: &str = "DEEPERASER_CORS_ORIGIN";

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_MAX_SIDE: u32 = 1024;
/// Upper bound on `iters` per request.
pub const MAX_ITERS: usize = 64;
/// Request bodies above this are refused before parsing.
pub const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub checkpoint: PathBuf,
    pub port: u16,
    /// Largest accepted width and height.
    pub max_side: u32,
    /// UI build to serve at `/`.
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl ServeConfig {
    /// Reads the `DEEPERASER_*` variables. The checkpoint is required.
    pub fn from_env() -> Result<Self, String> {
        let checkpoint = std::env::var(ENV_CHECKPOINT).map_err(|_| format!("{ENV_CHECKPOINT} is not set"))?;
        let port = match std::env::var(ENV_PORT) {
            Ok(p) => p.parse().map_err(|_| format!("{ENV_PORT}: invalid port {p:?}"))?,
            Err(_) => DEFAULT_PORT,
        };
        Ok(ServeConfig {
            checkpoint: checkpoint.into(),
            port,
            max_side: DEFAULT_MAX_SIDE,
            static_dir: std::env::var(ENV_STATIC_DIR).ok().map(PathBuf::from),
            cors_origin: std::env::var(ENV_CORS_ORIGIN).ok(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub param_count: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub checkpoint_id: String,
}

/// Loaded weights. Never mutated after construction.
pub struct Engine {
    model: Model<f32>,
    info: ModelInfo,
}

impl Engine {
    pub fn new(model: Model<f32>) -> Self {
        let info = ModelInfo {
            param_count: count_parameters(&model, ParamScope::All),
            k: model.config().iterations,
            d: model.config().latent_channels,
            checkpoint_id: checkpoint::checkpoint_id(&model),
        };
        Engine { model, info }
    }

    pub fn load(path: &std::path::Path) -> deeperaser::Result<Self> {
        Ok(Engine::new(checkpoint::load(path)?.model))
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }
}

/// Shared handler state. The engine slot is filled once loading finishes.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<OnceLock<Arc<Engine>>>,
    gate: Arc<Semaphore>,
    max_side: u32,
}

impl AppState {
    pub fn empty(max_side: u32) -> Self {
        AppState {
            engine: Arc::new(OnceLock::new()),
            gate: Arc::new(Semaphore::new(1)),
            max_side,
        }
    }

    pub fn with_engine(engine: Engine, max_side: u32) -> Self {
        let s = AppState::empty(max_side);
        s.install(engine);
        s
    }

    /// Publishes the engine. Later calls are ignored.
    pub fn install(&self, engine: Engine) {
        let _ = self.engine.set(Arc::new(engine));
    }

    fn engine(&self) -> Option<Arc<Engine>> {
        self.engine.get().cloned()
    }
}

// ---------------------------------------------------------------- errors

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    TooLarge(String),
    MaskSource(String),
    NotReady,
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

static ERROR_SEQ: AtomicU64 = AtomicU64::new(0);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, id) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m, None),
            ApiError::TooLarge(m) => (StatusCode::PAYLOAD_TOO_LARGE, m, None),
            ApiError::MaskSource(m) => (StatusCode::UNPROCESSABLE_ENTITY, m, None),
            ApiError::NotReady => (StatusCode::SERVICE_UNAVAILABLE, "checkpoint is still loading".to_string(), None),
            ApiError::Internal(detail) => {
                let nanos = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos() as u64)
                    .unwrap_or(0);
                let id = format!("{:08x}-{:04x}", nanos as u32, ERROR_SEQ.fetch_add(1, Ordering::Relaxed) as u16);
                eprintln!("internal error {id}: {detail}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal error".to_string(), Some(id))
            }
        };
        (status, Json(ErrorBody { error, id })).into_response()
    }
}

// ------------------------------------------------------------- wire types

/// JSON request body. Images are base64-encoded PNG.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraseRequest {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strokes: Option<StrokeSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default)]
    pub return_frames: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EraseResponse {
    /// Base64 PNG.
    pub result: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<String>>,
    pub timing_ms: f64,
    pub model_info: ModelInfo,
}

#[derive(Debug, Default, Deserialize)]
pub struct EraseQuery {
    #[serde(default)]
    pub raw: bool,
}

/// Decoded request, independent of transport.
struct Decoded {
    image_png: Vec<u8>,
    mask_png: Option<Vec<u8>>,
    strokes: Option<StrokeSet>,
    iters: Option<usize>,
    return_frames: bool,
}

fn b64(field: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim()).map_err(|e| ApiError::BadRequest(format!("{field}: invalid base64: {e}")))
}

fn parse_flag(field: &str, v: &str) -> Result<bool, ApiError> {
    match v.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" | "" => Ok(false),
        other => Err(ApiError::BadRequest(format!("{field}: expected a boolean, got {other:?}"))),
    }
}

async fn decode_multipart(mut mp: Multipart) -> Result<Decoded, ApiError> {
    let mut d = Decoded {
        image_png: Vec::new(),
        mask_png: None,
        strokes: None,
        iters: None,
        return_frames: false,
    };
    let mut have_image = false;
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::BadRequest(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or("").to_string();
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::BadRequest(format!("multipart field {name}: {e}")))?;
        let text = || String::from_utf8(data.to_vec()).map_err(|_| ApiError::BadRequest(format!("{name}: not UTF-8")));
        match name.as_str() {
            "image" => {
                d.image_png = data.to_vec();
                have_image = true;
            }
            "mask" => d.mask_png = Some(data.to_vec()),
            "strokes" => {
                d.strokes = Some(
                    serde_json::from_slice(&data).map_err(|e| ApiError::BadRequest(format!("strokes: {e}")))?,
                )
            }
            "iters" => {
                d.iters = Some(
                    text()?
                        .trim()
                        .parse()
                        .map_err(|_| ApiError::BadRequest("iters: expected a non-negative integer".into()))?,
                )
            }
            "return_frames" => d.return_frames = parse_flag("return_frames", &text()?)?,
            other => return Err(ApiError::BadRequest(format!("unknown field {other:?}"))),
        }
    }
    if !have_image {
        return Err(ApiError::BadRequest("missing field \"image\"".into()));
    }
    Ok(d)
}

fn decode_json(body: &[u8]) -> Result<Decoded, ApiError> {
    let req: EraseRequest =
        serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
    Ok(Decoded {
        image_png: b64("image", &req.image)?,
        mask_png: req.mask.as_deref().map(|m| b64("mask", m)).transpose()?,
        strokes: req.strokes,
        iters: req.iters,
        return_frames: req.return_frames,
    })
}

// --------------------------------------------------------------- handlers

/// Runs the network and builds the response. Pure function of its inputs.
pub fn erase(engine: &Engine, image: &Tensor<f32>, mask: &Tensor<f32>, iters: usize, return_frames: bool, raw: bool) -> deeperaser::Result<EraseResponse> {
    let t0 = Instant::now();
    let out = forward(&engine.model, image, mask, iters)?;
    let last = io::round_trip_8bit(out.predictions.last().expect("at least one prediction"));
    let result = if raw { last } else { composite_non_text(&last, image, mask)? };
    let frames = return_frames.then(|| out.predictions.iter().map(|p| B64.encode(io::encode_tensor_png(p))).collect());
    Ok(EraseResponse {
        result: B64.encode(io::encode_tensor_png(&result)),
        frames,
        timing_ms: t0.elapsed().as_secs_f64() * 1e3,
        model_info: engine.info.clone(),
    })
}

async fn erase_handler(State(state): State<AppState>, Query(query): Query<EraseQuery>, req: Request) -> Result<Json<EraseResponse>, ApiError> {
    let engine = state.engine().ok_or(ApiError::NotReady)?;
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("multipart/form-data"));
    let decoded = if is_multipart {
        let mp = Multipart::from_request(req, &state)
            .await
            .map_err(|e| ApiError::BadRequest(e.body_text()))?;
        decode_multipart(mp).await?
    } else {
        let body = Bytes::from_request(req, &state).await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                ApiError::TooLarge(e.body_text())
            } else {
                ApiError::BadRequest(e.body_text())
            }
        })?;
        decode_json(&body)?
    };

    let (w, h) = io::image_dimensions(&decoded.image_png).map_err(|e| ApiError::BadRequest(format!("image: {e}")))?;
    if w > state.max_side || h > state.max_side {
        return Err(ApiError::TooLarge(format!(
            "image is {w}x{h}; the maximum is {m}x{m}",
            m = state.max_side
        )));
    }
    let image = io::decode_image(&decoded.image_png).map_err(|e| ApiError::BadRequest(format!("image: {e}")))?;
    let mask = match (&decoded.mask_png, &decoded.strokes) {
        (Some(_), Some(_)) => return Err(ApiError::MaskSource("give either mask or strokes, not both".into())),
        (None, None) => return Err(ApiError::MaskSource("one of mask or strokes is required".into())),
        (Some(png), None) => io::decode_mask_png(png).map_err(|e| ApiError::BadRequest(format!("mask: {e}")))?,
        (None, Some(s)) => {
            if s.canvas != [w, h] {
                return Err(ApiError::BadRequest(format!(
                    "strokes canvas {}x{} does not match image {w}x{h}",
                    s.canvas[0], s.canvas[1]
                )));
            }
            s.rasterize().map_err(|e| ApiError::BadRequest(format!("strokes: {e}")))?
        }
    };
    if !mask.same_spatial(&image) {
        return Err(ApiError::BadRequest(format!(
            "mask is {}x{}, image is {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    let iters = decoded.iters.unwrap_or(engine.info.k);
    if iters == 0 || iters > MAX_ITERS {
        return Err(ApiError::BadRequest(format!("iters must be in 1..={MAX_ITERS}, got {iters}")));
    }

    let _permit = state
        .gate
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let return_frames = decoded.return_frames;
    let raw = query.raw;
    let resp = tokio::task::spawn_blocking(move || erase(&engine, &image, &mask, iters, return_frames, raw))
        .await
        .map_err(|e| ApiError::Internal(format!("inference task: {e}")))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(resp))
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: Option<String>,
}

async fn health(State(state): State<AppState>) -> Response {
    match state.engine() {
        Some(e) => Json(Health {
            status: "ok".into(),
            checkpoint_id: Some(e.info.checkpoint_id.clone()),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "loading".into(),
                checkpoint_id: None,
            }),
        )
            .into_response(),
    }
}

async fn model_info(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(state.engine().ok_or(ApiError::NotReady)?.info.clone()))
}

fn cors(origin: Option<&str>) -> Result<CorsLayer, String> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| format!("invalid CORS origin {o:?}"))?),
        None => AllowOrigin::any(),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]))
}

/// API routes with CORS and the body limit applied.
pub fn router(state: AppState, cors_origin: Option<&str>, static_dir: Option<&std::path::Path>) -> Result<Router, String> {
    let mut app = Router::new()
        .route("/erase", post(erase_handler))
        .route("/health", get(health))
        .route("/model-info", get(model_info))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(cors(cors_origin)?)
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    Ok(app)
}

/// Binds, starts serving and loads the checkpoint in the background;
/// `/health` answers 503 until loading completes.
pub async fn run(config: ServeConfig) -> Result<(), String> {
    let state = AppState::empty(config.max_side);
    let app = router(state.clone(), config.cors_origin.as_deref(), config.static_dir.as_deref())?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| format!("cannot bind {addr}: {e}"))?;
    eprintln!("listening on {addr}");
    let path = config.checkpoint.clone();
    let loader = tokio::task::spawn_blocking(move || Engine::load(&path));
    let serve = std::future::IntoFuture::into_future(axum::serve(listener, app));
    tokio::pin!(serve);
    let mut loader = Some(loader);
    loop {
        tokio::select! {
            res = &mut serve => return res.map_err(|e| e.to_string()),
            done = async { loader.as_mut().expect("polled only while pending").await }, if loader.is_some() => {
                loader = None;
                match done {
                    Ok(Ok(engine)) => {
                        eprintln!("checkpoint {} loaded", engine.info.checkpoint_id);
                        state.install(engine);
                    }
                    Ok(Err(e)) => return Err(format!("{}: {e}", config.checkpoint.display())),
                    Err(e) => return Err(format!("checkpoint loader: {e}")),
                }
            }
        }
    }
}
