//! HTTP screening service.
//!
//! `POST /api/v1/predict` takes a multipart form (`image`, `consent_to_store`,
//! `want_heatmap`) and answers with class probabilities and the suspected-mpox
//! verdict. Uploads reach disk only when `consent_to_store` is true.

pub mod config;
pub mod storage;

use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use lesionscreen_core::engine::{self, EngineError, ModelGraph, Prediction, FORMAT_VERSION};
use lesionscreen_core::imaging::{self, ImagingError};
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use serde_json::json;
use thiserror::Error;
use tower_http::services::ServeDir;

pub use config::{ServiceConfig, CONFIG_FORMAT, DEFAULT_MAX_UPLOAD_BYTES, ENV_PREFIX};
pub use storage::{StoredUpload, UploadStore, CONSENT_LOG, UPLOADS_DIR};

/// Returned verbatim with every prediction.
pub const DISCLAIMER: &str = "This tool is a research screening aid, not a medical diagnosis. \
Results can be wrong. Consult a qualified healthcare professional about any skin lesion or symptoms.";

/// Multipart framing allowance on top of the image size limit.
const MULTIPART_OVERHEAD: usize = 64 * 1024;

/// Opacity of the red Grad-CAM overlay.
const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Config(_) => "Config",
            ServiceError::Model(e) => e.code(),
            ServiceError::Io { .. } => "Io",
        }
    }
}

/// A model plus the identifier clients see.
#[derive(Debug)]
pub struct LoadedModel {
    pub graph: ModelGraph,
    pub model_id: String,
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let graph = ModelGraph::load(bytes)?;
        let model_id = graph.model_id();
        Ok(Self { graph, model_id })
    }
}

#[derive(Debug)]
pub struct AppState {
    config: ServiceConfig,
    model: RwLock<Option<Arc<LoadedModel>>>,
    store: UploadStore,
    started: Instant,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            store: UploadStore::new(config.storage_dir.clone()),
            config,
            model: RwLock::new(None),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &UploadStore {
        &self.store
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock poisoned").clone()
    }

    /// Atomically replaces the served model; requests in flight keep the old one.
    pub fn swap_model(&self, model: LoadedModel) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(model));
    }

    pub fn load_model_file(&self, path: &Path) -> Result<(), ServiceError> {
        let bytes = std::fs::read(path).map_err(|source| ServiceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let model = LoadedModel::from_bytes(&bytes)?;
        tracing::info!(model_id = %model.model_id, path = %path.display(), "model loaded");
        self.swap_model(model);
        Ok(())
    }

    /// Reloads `model_path` from the config, if one is set.
    pub fn reload(&self) -> Result<(), ServiceError> {
        match &self.config.model_path {
            Some(p) => self.load_model_file(p),
            None => Err(ServiceError::Config("no model_path configured".into())),
        }
    }
}

/// Error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn no_model() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "ModelNotLoaded",
            "no model is loaded yet",
        )
    }

    fn too_large(limit: usize) -> Self {
        Self::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "PayloadTooLarge",
            format!("image exceeds {limit} bytes"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": {"code": self.code, "message": self.message}})),
        )
            .into_response()
    }
}

impl From<ImagingError> for ApiError {
    fn from(e: ImagingError) -> Self {
        let status = match e {
            ImagingError::MalformedImage(_)
            | ImagingError::UnsupportedFormat
            | ImagingError::DegenerateInput(_) => StatusCode::BAD_REQUEST,
            ImagingError::Encode(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = match e {
            ImagingError::DegenerateInput(_) => "MalformedImage",
            _ => e.code(),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Imaging(inner) => inner.into(),
            other => Self::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                other.code(),
                other.to_string(),
            ),
        }
    }
}

fn multipart_error(e: MultipartError, limit: usize) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::too_large(limit)
    } else {
        ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", e.body_text())
    }
}

/// Probabilities keyed by class name, in model class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(pub Vec<(String, f64)>);

impl Serialize for ClassProbabilities {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictResponse {
    pub probabilities: ClassProbabilities,
    pub suspected_mpox: bool,
    pub mpox_probability: f64,
    pub advice: &'static str,
    /// Base64 PNG of the red Grad-CAM overlay on the model input.
    pub heatmap: Option<String>,
    pub model_id: String,
}

fn parse_flag(name: &str, text: &str) -> Result<bool, ApiError> {
    match text.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" | "" => Ok(false),
        other => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "MalformedRequest",
            format!("{name}: expected a boolean, got {other:?}"),
        )),
    }
}

struct PredictForm {
    image: Vec<u8>,
    consent_to_store: bool,
    want_heatmap: bool,
}

async fn read_form(mut mp: Multipart, limit: usize) -> Result<PredictForm, ApiError> {
    let mut image = None;
    let mut consent_to_store = false;
    let mut want_heatmap = false;
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| multipart_error(e, limit))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| multipart_error(e, limit))?;
        match name.as_str() {
            "image" => image = Some(bytes.to_vec()),
            "consent_to_store" => {
                consent_to_store = parse_flag(&name, &String::from_utf8_lossy(&bytes))?
            }
            "want_heatmap" => want_heatmap = parse_flag(&name, &String::from_utf8_lossy(&bytes))?,
            _ => {}
        }
    }
    let image = image.ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "MalformedImage",
            "missing `image` field",
        )
    })?;
    if image.len() > limit {
        return Err(ApiError::too_large(limit));
    }
    if image.is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "MalformedImage",
            "empty upload",
        ));
    }
    Ok(PredictForm {
        image,
        consent_to_store,
        want_heatmap,
    })
}

fn heatmap_png(
    m: &ModelGraph,
    raster: &imaging::Raster,
    p: &Prediction,
) -> Result<String, ApiError> {
    let map = engine::grad_cam(m, raster, p.argmax)?;
    let base = imaging::crop_resize(raster, m.input_side() as u32)?;
    let png = imaging::encode_png(&map.overlay_red(&base, OVERLAY_ALPHA)?)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

/// Runs the full decode, predict and optional Grad-CAM path on raw upload bytes.
pub fn screen_bytes(
    model: &LoadedModel,
    bytes: &[u8],
    threshold: f64,
    want_heatmap: bool,
) -> Result<PredictResponse, ApiError> {
    let raster = imaging::decode_image(bytes)?;
    let p = engine::predict(&model.graph, &raster, threshold)?;
    let heatmap = if want_heatmap {
        Some(heatmap_png(&model.graph, &raster, &p)?)
    } else {
        None
    };
    Ok(PredictResponse {
        probabilities: ClassProbabilities(
            model
                .graph
                .class_names()
                .iter()
                .cloned()
                .zip(p.probabilities.iter().copied())
                .collect(),
        ),
        suspected_mpox: p.suspected_mpox,
        mpox_probability: p.mpox_probability,
        advice: DISCLAIMER,
        heatmap,
        model_id: model.model_id.clone(),
    })
}

async fn predict(
    State(state): State<Arc<AppState>>,
    mp: Multipart,
) -> Result<Json<PredictResponse>, ApiError> {
    let model = state.model().ok_or_else(ApiError::no_model)?;
    let form = read_form(mp, state.config.max_upload_bytes).await?;
    let threshold = state.config.threshold;
    let form = Arc::new(form);
    let job = Arc::clone(&form);
    let response = tokio::task::spawn_blocking(move || {
        screen_bytes(&model, &job.image, threshold, job.want_heatmap)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    if form.consent_to_store {
        let stored = state
            .store
            .store_consented(&form.image)
            .await
            .map_err(|e| {
                ApiError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "StorageFailed",
                    e.to_string(),
                )
            })?;
        tracing::info!(upload_id = %stored.upload_id, "upload stored with consent");
    }
    Ok(Json(response))
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let uptime = state.started.elapsed().as_secs_f64();
    match state.model() {
        Some(m) => {
            Json(json!({"status": "ok", "model_id": m.model_id, "uptime": uptime})).into_response()
        }
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"status": "loading", "model_id": null, "uptime": uptime})),
        )
            .into_response(),
    }
}

async fn model_info(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let m = state.model().ok_or_else(ApiError::no_model)?;
    Ok(Json(json!({
        "class_names": m.graph.class_names(),
        "input_side": m.graph.input_side(),
        "threshold": state.config.threshold,
        "format_version": FORMAT_VERSION,
        "model_id": m.model_id,
    }))
    .into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    let api = Router::new()
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/health", get(health))
        .route("/api/v1/model-info", get(model_info))
        .layer(DefaultBodyLimit::max(
            limit.saturating_add(MULTIPART_OVERHEAD),
        ));
    let app = match state.config.webui_dir.as_ref().filter(|d| d.is_dir()) {
        Some(dir) => {
            api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true))
        }
        None => api.fallback(not_found),
    };
    app.with_state(state)
}

/// Binds, starts answering immediately (503 until the model is in), loads the
/// configured model in the background and reloads it on SIGHUP.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServiceError::Io {
            path: config.bind.to_string(),
            source,
        })?;
    let state = AppState::new(config);
    tracing::info!(addr = %state.config.bind, "listening");
    if state.config.model_path.is_some() {
        let s = Arc::clone(&state);
        tokio::task::spawn_blocking(move || {
            if let Err(e) = s.reload() {
                tracing::error!(error = %e, "model load failed");
            }
        });
    }
    #[cfg(unix)]
    {
        let s = Arc::clone(&state);
        if let Ok(mut hup) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())
        {
            tokio::spawn(async move {
                while hup.recv().await.is_some() {
                    let s = Arc::clone(&s);
                    let _ = tokio::task::spawn_blocking(move || {
                        if let Err(e) = s.reload() {
                            tracing::error!(error = %e, "model reload failed; keeping the previous model");
                        }
                    })
                    .await;
                }
            });
        }
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| ServiceError::Io {
            path: "server".into(),
            source,
        })
}
