//! HTTP session API for interactive trimap matting.
//!
//! A session holds one uploaded image plus the latest trimap and alpha.
//! Sessions live in memory, expire after a TTL of inactivity and are capped
//! in number. Requests against the same session are serialized; different
//! sessions run concurrently against one shared model.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use plainmatte::backbone::AttentionMode;
use plainmatte::data::io::{decode_gray, decode_rgb, encode_gray_png, encode_rgb_png, probe_dims};
use plainmatte::data::{composite, fit_background};
use plainmatte::error::MatteError;
use plainmatte::inference::{infer, InferenceRequest};
use plainmatte::model::Model;
use plainmatte::plane::{MattingInput, Plane};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Header carrying the per-request matte summary as JSON.
pub const METRICS_HEADER: &str = "x-matte-metrics";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_pixels: usize,
    pub max_sessions: usize,
    pub ttl: Duration,
    pub max_body_bytes: usize,
    /// Origin allowed by CORS; `None` allows any.
    pub allowed_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_pixels: 4096 * 4096,
            max_sessions: 64,
            ttl: Duration::from_secs(30 * 60),
            max_body_bytes: 64 << 20,
            allowed_origin: None,
        }
    }
}

#[derive(Debug)]
pub struct Session {
    pub image: Plane<f32>,
    pub trimap: Option<Plane<f32>>,
    pub alpha: Option<Plane<f32>>,
    pub created_at: Instant,
}

struct Slot {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Instant,
}

pub struct AppState {
    model: Arc<Model<f32>>,
    sessions: Mutex<HashMap<String, Slot>>,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(model: Model<f32>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self { model: Arc::new(model), sessions: Mutex::new(HashMap::new()), config })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn evict_expired(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().expect("session map poisoned");
        let before = map.len();
        map.retain(|_, slot| now.saturating_duration_since(slot.last_used) < self.config.ttl);
        before - map.len()
    }

    fn insert(&self, session: Session) -> Result<String, ApiError> {
        let now = Instant::now();
        self.evict_expired(now);
        let mut map = self.sessions.lock().expect("session map poisoned");
        if map.len() >= self.config.max_sessions {
            return Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "session_limit",
                format!("session cap of {} reached", self.config.max_sessions),
            ));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        map.insert(id.clone(), Slot { session: Arc::new(tokio::sync::Mutex::new(session)), last_used: now });
        Ok(id)
    }

    fn lookup(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        let now = Instant::now();
        let mut map = self.sessions.lock().expect("session map poisoned");
        match map.get_mut(id) {
            Some(slot) if now.saturating_duration_since(slot.last_used) < self.config.ttl => {
                slot.last_used = now;
                Ok(slot.session.clone())
            }
            Some(_) => {
                map.remove(id);
                Err(ApiError::unknown_session(id))
            }
            None => Err(ApiError::unknown_session(id)),
        }
    }

    fn remove(&self, id: &str) -> bool {
        self.sessions.lock().expect("session map poisoned").remove(id).is_some()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`"))
    }

    fn bad_format(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_format", e.to_string())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code.to_string(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}

fn body_bytes(body: Result<Bytes, BytesRejection>) -> Result<Bytes, ApiError> {
    let bytes = body.map_err(|r| {
        let status = r.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "too_large" } else { "bad_body" };
        ApiError::new(status, code, r.body_text())
    })?;
    if bytes.is_empty() {
        return Err(ApiError::bad_format("empty body"));
    }
    Ok(bytes)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionCreated {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionInfo {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub has_trimap: bool,
    pub has_alpha: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct MatteQuery {
    pub strategy: Option<String>,
}

/// Summary returned in [`METRICS_HEADER`]. Means are `null` when the trimap
/// has no pixels of that label.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MatteSummary {
    pub strategy: String,
    pub width: usize,
    pub height: usize,
    pub unknown_fraction: f64,
    pub mean_alpha: f64,
    pub mean_alpha_fg: Option<f64>,
    pub mean_alpha_bg: Option<f64>,
    pub elapsed_ms: u64,
}

fn parse_strategy(s: Option<&str>) -> Result<AttentionMode, ApiError> {
    match s.unwrap_or("normal") {
        "normal" => Ok(AttentionMode::Normal),
        "grid" | "grid_sample" => Ok(AttentionMode::GridSample),
        other => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_strategy",
            format!("unknown strategy `{other}` (expected normal or grid)"),
        )),
    }
}

fn summarize(trimap: &Plane<f32>, alpha: &Plane<f32>, strategy: AttentionMode, elapsed: Duration) -> MatteSummary {
    let mean_where = |level: f32| {
        let (mut s, mut n) = (0.0f64, 0usize);
        for (&t, &a) in trimap.data().iter().zip(alpha.data()) {
            if t == level {
                s += a as f64;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    };
    let total = alpha.data().len().max(1) as f64;
    let (h, w) = alpha.dims();
    MatteSummary {
        strategy: match strategy {
            AttentionMode::Normal => "normal".into(),
            AttentionMode::GridSample => "grid".into(),
        },
        width: w,
        height: h,
        unknown_fraction: trimap.data().iter().filter(|&&t| t == 0.5).count() as f64 / total,
        mean_alpha: alpha.data().iter().map(|&a| a as f64).sum::<f64>() / total,
        mean_alpha_fg: mean_where(1.0),
        mean_alpha_bg: mean_where(0.0),
        elapsed_ms: elapsed.as_millis() as u64,
    }
}

fn png_response(png: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], png).into_response()
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": state.session_count() }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let bytes = body_bytes(body)?;
    let (h, w) = probe_dims(&bytes).map_err(ApiError::bad_format)?;
    if h.saturating_mul(w) > state.config.max_pixels {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_large",
            format!("{h}x{w} exceeds {} pixels", state.config.max_pixels),
        ));
    }
    let image = blocking(move || decode_rgb(&bytes)).await?.map_err(ApiError::bad_format)?;
    let (height, width) = image.dims();
    let session_id = state.insert(Session { image, trimap: None, alpha: None, created_at: Instant::now() })?;
    tracing::debug!(%session_id, height, width, "session created");
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id, width, height })))
}

async fn session_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ApiError> {
    let session = state.lookup(&id)?;
    let s = session.lock().await;
    let (height, width) = s.image.dims();
    Ok(Json(SessionInfo { session_id: id, width, height, has_trimap: s.trimap.is_some(), has_alpha: s.alpha.is_some() }))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if state.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::unknown_session(&id))
    }
}

async fn matte(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<MatteQuery>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let strategy = parse_strategy(q.strategy.as_deref())?;
    let session = state.lookup(&id)?;
    let bytes = body_bytes(body)?;
    let trimap = blocking(move || decode_gray(&bytes)).await?.map_err(ApiError::bad_format)?;

    let mut s = session.lock().await;
    if trimap.dims() != s.image.dims() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "trimap_mismatch",
            format!("trimap is {:?}, image is {:?}", trimap.dims(), s.image.dims()),
        ));
    }
    let input = MattingInput::with_snapped_trimap(s.image.clone(), trimap).map_err(|e| match e {
        MatteError::InvalidTrimapValue { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_trimap", e.to_string()),
        other => ApiError::internal(other),
    })?;
    let model = state.model.clone();
    let started = Instant::now();
    let (trimap, alpha, png) = blocking(move || {
        let request = InferenceRequest { input, strategy };
        let alpha = infer(&model, &request)?;
        let png = encode_gray_png(&alpha)?;
        Ok::<_, MatteError>((request.input.trimap, alpha, png))
    })
    .await?
    .map_err(|e| match e {
        MatteError::TooSmall(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "too_small", e.to_string()),
        other => ApiError::internal(other),
    })?;
    let summary = summarize(&trimap, &alpha, strategy, started.elapsed());
    s.trimap = Some(trimap);
    s.alpha = Some(alpha);
    drop(s);

    let mut resp = png_response(png);
    let json = serde_json::to_string(&summary).map_err(ApiError::internal)?;
    resp.headers_mut().insert(METRICS_HEADER, HeaderValue::from_str(&json).map_err(ApiError::internal)?);
    Ok(resp)
}

async fn composite_background(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let session = state.lookup(&id)?;
    let s = session.lock().await;
    let Some(alpha) = s.alpha.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_alpha", "request a matte before compositing"));
    };
    let image = s.image.clone();
    drop(s);
    let bytes = body_bytes(body)?;
    let png = blocking(move || {
        let bg = decode_rgb(&bytes)?;
        let (h, w) = image.dims();
        let out = composite(&image, &fit_background(&bg, h, w), &alpha)?;
        encode_rgb_png(&out)
    })
    .await?
    .map_err(|e| match e {
        MatteError::CorruptImage { .. } => ApiError::bad_format(e),
        other => ApiError::internal(other),
    })?;
    Ok(png_response(png))
}

fn cors(origin: Option<&str>) -> CorsLayer {
    let allow = match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::DELETE, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([header::HeaderName::from_static(METRICS_HEADER)])
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    let cors = cors(state.config.allowed_origin.as_deref());
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/matte", post(matte))
        .route("/sessions/{id}/composite", post(composite_background))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until the process exits. A background task sweeps
/// expired sessions once a minute.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60).min(sweeper.config.ttl));
        loop {
            tick.tick().await;
            let n = sweeper.evict_expired(Instant::now());
            if n > 0 {
                tracing::info!(evicted = n, "expired sessions dropped");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names() {
        assert_eq!(parse_strategy(None).unwrap(), AttentionMode::Normal);
        assert_eq!(parse_strategy(Some("grid")).unwrap(), AttentionMode::GridSample);
        assert_eq!(parse_strategy(Some("bogus")).unwrap_err().status, StatusCode::BAD_REQUEST);
    }

    #[test]
    fn summary_means_by_label() {
        let tri = Plane::new(1, 1, 4, vec![0.0, 0.5, 1.0, 1.0]).unwrap();
        let alpha = Plane::new(1, 1, 4, vec![0.2, 0.5, 0.8, 1.0]).unwrap();
        let s = summarize(&tri, &alpha, AttentionMode::Normal, Duration::ZERO);
        assert_eq!(s.unknown_fraction, 0.25);
        assert!((s.mean_alpha_fg.unwrap() - 0.9).abs() < 1e-6);
        assert!((s.mean_alpha_bg.unwrap() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn ttl_eviction() {
        let model = Model::init(plainmatte::config::ModelConfig::tiny(), 0).unwrap();
        let cfg = ServiceConfig { ttl: Duration::from_secs(10), ..Default::default() };
        let state = AppState::new(model, cfg);
        let img = Plane::filled(3, 8, 8, 0.5f32);
        let id = state.insert(Session { image: img, trimap: None, alpha: None, created_at: Instant::now() }).unwrap();
        assert_eq!(state.evict_expired(Instant::now()), 0);
        assert!(state.lookup(&id).is_ok());
        assert_eq!(state.evict_expired(Instant::now() + Duration::from_secs(11)), 1);
        assert_eq!(state.lookup(&id).unwrap_err().status, StatusCode::NOT_FOUND);
    }
}
