//! Session-oriented HTTP API. Each session owns one engine session behind
//! an async mutex, so requests on one session run in arrival order while
//! different sessions proceed concurrently.

use crate::wire::{rle_encode, FieldError, GuidanceRequest, StateResponse};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memseg_core::data::io::{encode_png_gray, load_volume, mask_png, raw_mask_bytes, window_to_u8, VolumeFormat};
use memseg_core::data::Volume;
use memseg_core::engine::{EngineConfig, Session};
use memseg_core::training::synthetic::{generate_synthetic_volume, SyntheticVolumeSpec, TargetKind};
use memseg_core::{Error as CoreError, Models32, Session32};
use ndarray::Array3;
use serde::Deserialize;
use serde_json::json;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use tokio::sync::Mutex;

pub struct AppState {
    models: Arc<Models32>,
    engine: EngineConfig,
    synthetic: SyntheticVolumeSpec,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session32>>>>,
}

impl AppState {
    pub fn new(models: Arc<Models32>, engine: EngineConfig, synthetic: SyntheticVolumeSpec) -> Arc<Self> {
        Arc::new(Self {
            models,
            engine,
            synthetic,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session32>>, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))
    }
}

pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn not_found(msg: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            body: json!({ "error": msg }),
        }
    }

    fn field(e: FieldError) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": e.message, "field": e.field }),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let (status, slice) = match &e {
            CoreError::Argument(_) | CoreError::Validation(_) | CoreError::Format(_) | CoreError::Io { .. } => {
                (StatusCode::BAD_REQUEST, None)
            }
            CoreError::Numeric { slice, .. } => (StatusCode::INTERNAL_SERVER_ERROR, *slice),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        Self {
            status,
            body: json!({ "error": e.to_string(), "slice_index": slice }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct SyntheticRef {
    pub seed: u64,
    pub target: Option<TargetKind>,
}

#[derive(Debug, Deserialize)]
pub struct Upload {
    pub shape: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    /// Voxels in `(h, w, c)` order with the slice index fastest.
    pub voxels: Vec<f32>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// Exactly one of the volume sources.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub volume_path: Option<String>,
    pub synthetic: Option<SyntheticRef>,
    pub upload: Option<Upload>,
    /// Intensity window mapped to [0, 1] before segmentation.
    pub window: Option<[f64; 2]>,
}

fn build_volume(req: CreateSession, base: &SyntheticVolumeSpec) -> ApiResult<Volume<f32>> {
    let sources = [req.volume_path.is_some(), req.synthetic.is_some(), req.upload.is_some()];
    if sources.iter().filter(|&&b| b).count() != 1 {
        return Err(ApiError::field(FieldError::new(
            "body",
            "give exactly one of volume_path, synthetic, upload",
        )));
    }
    let vol: Volume<f32> = if let Some(p) = req.volume_path {
        let path = std::path::PathBuf::from(p);
        load_volume(&path, VolumeFormat::from_path(&path))?
    } else if let Some(syn) = req.synthetic {
        let spec = SyntheticVolumeSpec {
            seed: syn.seed,
            target: syn.target.unwrap_or(base.target),
            ..base.clone()
        };
        generate_synthetic_volume(&spec)?.0.cast()
    } else {
        let up = req.upload.expect("one source present");
        let [h, w, c] = up.shape;
        let voxels = Array3::from_shape_vec((h, w, c), up.voxels)
            .map_err(|_| ApiError::field(FieldError::new("upload.voxels", format!("expected {} values", h * w * c))))?;
        Volume::new(voxels, up.spacing, "upload")?
    };
    match req.window {
        Some([lo, hi]) => Ok(vol.normalize_intensity(lo, hi)?),
        None => Ok(vol),
    }
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let req: CreateSession = serde_path_to_error::deserialize(de)
        .map_err(|e| ApiError::field(FieldError::new(e.path().to_string(), e.into_inner().to_string())))?;
    let base = app.synthetic.clone();
    let vol = tokio::task::spawn_blocking(move || build_volume(req, &base))
        .await
        .expect("volume loader panicked")?;
    let (h, w, c) = vol.dim();
    let sess = Session::new(vol, app.models.clone(), app.engine.clone())?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    app.sessions
        .write()
        .expect("session table poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(sess)));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "c": c, "h": h, "w": w }))))
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    window: Option<String>,
}

fn parse_window(w: Option<&str>) -> ApiResult<(f64, f64)> {
    let Some(text) = w else { return Ok((0.0, 1.0)) };
    let bad = || ApiError::field(FieldError::new("window", format!("expected 'lo,hi', got '{text}'")));
    let (lo, hi) = text.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn check_slice(k: usize, c: usize) -> ApiResult<()> {
    if k >= c {
        return Err(ApiError::not_found(format!("slice {k} out of range for {c} slices")));
    }
    Ok(())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_slice(
    State(app): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let (lo, hi) = parse_window(q.window.as_deref())?;
    let sess = app.session(&id)?;
    let sess = sess.lock().await;
    check_slice(k, sess.volume().num_slices())?;
    let img = window_to_u8(sess.volume().slice(k), lo, hi)?;
    Ok(png(encode_png_gray(&img)))
}

async fn post_guidance(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let sess = app.session(&id)?;
    let req = GuidanceRequest::from_json(&body).map_err(ApiError::field)?;
    let mut guard = sess.lock_owned().await;
    let (h, w, c) = guard.volume().dim();
    let guidance = req.to_guidance(h, w, c).map_err(ApiError::field)?;
    let round = tokio::task::spawn_blocking(move || -> Result<usize, CoreError> {
        guard.refine_round(&guidance)?;
        Ok(guard.state().round)
    })
    .await
    .expect("engine task panicked")
    .map_err(|e| match e {
        // Input was validated above; anything left is an engine failure.
        CoreError::Argument(_) => ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: json!({ "error": e.to_string(), "slice_index": null }),
        },
        other => other.into(),
    })?;
    Ok(Json(json!({ "round": round, "status": "ok" })))
}

#[derive(Debug, Deserialize)]
struct MaskQuery {
    format: Option<String>,
}

async fn get_mask(
    State(app): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
    Query(q): Query<MaskQuery>,
) -> ApiResult<Response> {
    let sess = app.session(&id)?;
    let sess = sess.lock().await;
    check_slice(k, sess.volume().num_slices())?;
    let mask = sess.state().masks[k].binarize();
    match q.format.as_deref().unwrap_or("png") {
        "png" => Ok(png(mask_png(&mask))),
        "rle" => Ok(Json(rle_encode(&mask)).into_response()),
        other => Err(ApiError::field(FieldError::new("format", format!("'{other}' is not png or rle")))),
    }
}

/// The whole binary mask as the bytes of a raw mask file.
async fn get_volume_mask(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let sess = app.session(&id)?;
    let sess = sess.lock().await;
    let bytes = raw_mask_bytes(&sess.state().binary_volume());
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<StateResponse>> {
    let sess = app.session(&id)?;
    let sess = sess.lock().await;
    Ok(Json(StateResponse::from_session(&sess)))
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let removed = app.sessions.write().expect("session table poisoned").remove(&id);
    match removed {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("no session '{id}'"))),
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/slices/{k}", get(get_slice))
        .route("/sessions/{id}/guidance", post(post_guidance))
        .route("/sessions/{id}/masks/{k}", get(get_mask))
        .route("/sessions/{id}/mask", get(get_volume_mask))
        .route("/sessions/{id}/state", get(get_state))
        .with_state(app)
}

/// Bind `addr` and return the listener with its resolved address.
pub async fn bind(addr: &str) -> std::io::Result<(tokio::net::TcpListener, std::net::SocketAddr)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

pub async fn serve(listener: tokio::net::TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}
