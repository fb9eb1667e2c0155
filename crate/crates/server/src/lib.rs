//! HTTP JSON service around the interactive guiding loop.
//!
//! Sessions live in memory and may be mirrored to a directory as replayable
//! histories. Requests on one session are serialised by a per-session lock;
//! different sessions proceed independently.

pub mod error;
pub mod rle;
pub mod session;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

pub use error::ApiError;
use session::{decode_image, decode_labels, Models, Session, SessionRecord, TurnOutcome, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    /// One `<id>.json` history per session, restored at startup.
    pub persist_dir: Option<PathBuf>,
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: 4 << 20,
            persist_dir: None,
            cors_origin: None,
        }
    }
}

type SessionHandle = Arc<Mutex<Session>>;

pub struct AppState {
    pub models: Arc<Models>,
    pub config: ServiceConfig,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

impl AppState {
    /// Restores every persisted session by replaying its history.
    pub fn new(models: Models, config: ServiceConfig) -> Result<Self, ApiError> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.persist_dir {
            std::fs::create_dir_all(dir).map_err(|e| ApiError::internal(format!("{}: {e}", dir.display())))?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| ApiError::internal(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for path in paths {
                let text = std::fs::read_to_string(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
                let record: SessionRecord = serde_json::from_str(&text)
                    .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
                let s = Session::replay(&models, &record)?;
                tracing::info!(id = %s.id, turns = s.turns().len(), "restored session");
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            models: Arc::new(models),
            config,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("session map").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn handle(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn persist(&self, s: &Session) -> Result<(), ApiError> {
        if let Some(dir) = &self.config.persist_dir {
            let text = serde_json::to_string(&s.record()).map_err(|e| ApiError::internal(e.to_string()))?;
            let path = record_path(dir, &s.id);
            std::fs::write(&path, text).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session).delete(delete_session))
        .route("/session/{id}/hint/text", post(text_hint))
        .route("/session/{id}/hint/pixel", post(pixel_hint))
        .route("/session/{id}/suggest-pixel", get(suggest_pixel))
        .route("/session/{id}/history", get(history))
        .route("/session/{id}/reset", post(reset))
        .layer(DefaultBodyLimit::disable());
    if let Some(origin) = &state.config.cors_origin {
        if let Ok(origin) = origin.parse::<HeaderValue>() {
            app = app.layer(
                CorsLayer::new()
                    .allow_origin(origin)
                    .allow_methods([Method::GET, Method::POST, Method::DELETE])
                    .allow_headers(Any),
            );
        }
    }
    app.with_state(state)
}

/// Run `f` on a blocking thread with the session locked.
async fn with_session<T: Send + 'static>(
    state: &Arc<AppState>,
    id: &str,
    f: impl FnOnce(&AppState, &mut Session) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let handle = state.handle(id)?;
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut s = handle.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
        f(&state, &mut s)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Debug, Clone, Serialize)]
pub struct LegendEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

const PALETTE: [[u8; 3]; 12] = [
    [135, 190, 235],
    [70, 160, 60],
    [230, 200, 120],
    [110, 80, 50],
    [220, 60, 40],
    [170, 110, 50],
    [20, 100, 40],
    [150, 150, 160],
    [120, 120, 110],
    [240, 240, 250],
    [200, 80, 200],
    [60, 60, 200],
];

pub fn legend(class_names: &[String]) -> Vec<LegendEntry> {
    class_names
        .iter()
        .enumerate()
        .map(|(i, name)| LegendEntry {
            id: i as u8,
            name: name.clone(),
            color: PALETTE[i % PALETTE.len()],
        })
        .collect()
}

fn params_summary(p: &segguide_core::guiding::GuidingParams<f32>) -> Value {
    json!({
        "params_ref": segguide_core::backprop::params_ref(p),
        "len": p.len(),
        "l2_norm": p.l2_norm(),
        "is_zero": p.is_zero(),
    })
}

fn turn_reply(id: &str, out: &TurnOutcome) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "session_id": id,
        "turn": out.turn,
        "prediction": rle::encode(out.prediction),
        "changed_pixels": out.turn.changed_pixels,
        "no_op": out.turn.no_op,
        "heatmap": B64.encode(&out.heatmap_png),
        "params_summary": params_summary(out.params),
        "loss_trace": out.turn.loss_trace,
        "miou": out.turn.miou,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    /// Base64 image file.
    image: String,
    /// Optional base64 single-channel label PNG, for per-turn mIoU.
    #[serde(default)]
    labels: Option<String>,
}

/// Accepts either a raw image body or JSON `{"image": b64, "labels"?: b64}`.
async fn create_session(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    let limit = state.config.max_upload_bytes;
    if body.len() > limit {
        return Err(ApiError::too_large(limit));
    }
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let (image_bytes, label_bytes) = if is_json {
        let req: CreateRequest = parse_json(&body)?;
        let dec = |s: &str| B64.decode(s).map_err(|e| ApiError::bad_request(format!("bad base64: {e}")));
        (dec(&req.image)?, req.labels.as_deref().map(dec).transpose()?)
    } else {
        (body.to_vec(), None)
    };
    let st = state.clone();
    let reply = tokio::task::spawn_blocking(move || -> Result<(Value, SessionHandle, String), ApiError> {
        let models = &st.models;
        let size = models.input_size();
        let image = decode_image(&image_bytes, size)?;
        let labels = label_bytes.map(|b| decode_labels(&b, size)).transpose()?;
        if let Some(l) = &labels {
            let nc = models.backbone.num_classes() as u8;
            if l.iter().any(|&v| v >= nc && v != segguide_core::dataset::IGNORE_LABEL) {
                return Err(ApiError::unprocessable("label map contains unknown class ids"));
            }
        }
        let id = loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if !st.sessions.read().expect("session map").contains_key(&id) {
                break id;
            }
        };
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let s = Session::create(models, id.clone(), created_at, image, labels)?;
        st.persist(&s)?;
        let reply = json!({
            "schema_version": SCHEMA_VERSION,
            "session_id": id,
            "image_size": [size.0, size.1],
            "prediction": rle::encode(s.prediction()),
            "legend": legend(models.backbone.class_names()),
            "miou": s.miou(models),
        });
        Ok((reply, Arc::new(Mutex::new(s)), id))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let (value, handle, id) = reply;
    state.sessions.write().expect("session map").insert(id, handle);
    Ok(Json(value))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    with_session(&state, &id.clone(), move |st, s| {
        Ok(Json(json!({
            "schema_version": SCHEMA_VERSION,
            "session_id": id,
            "prediction": rle::encode(s.prediction()),
            "turns": s.turns().len(),
            "heatmap": B64.encode(s.heatmap_png()),
            "params_summary": params_summary(s.params()),
            "miou": s.miou(&st.models),
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextHintRequest {
    text: String,
}

async fn text_hint(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    state.handle(&id)?;
    let req: TextHintRequest = parse_json(&body)?;
    with_session(&state, &id.clone(), move |st, s| {
        let reply = turn_reply(&id, &s.text_hint(&st.models, &req.text)?);
        st.persist(s)?;
        Ok(Json(reply))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PixelHintRequest {
    x: u64,
    y: u64,
    class_id: u64,
}

async fn pixel_hint(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    state.handle(&id)?;
    let req: PixelHintRequest = parse_json(&body)?;
    let (h, w) = state.models.input_size();
    let nc = state.models.backbone.num_classes() as u64;
    if req.x >= w as u64 || req.y >= h as u64 {
        return Err(ApiError::unprocessable(format!("pixel ({}, {}) outside {w}x{h}", req.x, req.y)));
    }
    if req.class_id >= nc {
        return Err(ApiError::unprocessable(format!("class {} outside 0..{nc}", req.class_id)));
    }
    with_session(&state, &id.clone(), move |st, s| {
        let out = s.pixel_hint(&st.models, req.x as usize, req.y as usize, req.class_id as u8)?;
        let reply = turn_reply(&id, &out);
        st.persist(s)?;
        Ok(Json(reply))
    })
    .await
}

async fn suggest_pixel(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    with_session(&state, &id, |_, s| {
        let p = s.suggest_pixel()?;
        Ok(Json(json!({
            "schema_version": SCHEMA_VERSION,
            "x": p.col,
            "y": p.row,
            "margin": p.margin,
        })))
    })
    .await
}

async fn history(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionRecord>, ApiError> {
    with_session(&state, &id, |_, s| Ok(Json(s.record()))).await
}

async fn reset(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    with_session(&state, &id.clone(), move |st, s| {
        s.reset(&st.models)?;
        st.persist(s)?;
        Ok(Json(json!({
            "schema_version": SCHEMA_VERSION,
            "session_id": id,
            "prediction": rle::encode(s.prediction()),
        })))
    })
    .await
}

async fn delete_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let removed = state.sessions.write().expect("session map").remove(&id);
    let handle = removed.ok_or_else(|| ApiError::not_found(&id))?;
    // wait for in-flight requests on this session
    drop(handle.lock());
    if let Some(dir) = &state.config.persist_dir {
        let path = record_path(dir, &id);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "deleted": id })))
}
