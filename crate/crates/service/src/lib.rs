//! HTTP facade over the relighting core: sessions, environment uploads,
//! weights and tone-mapped relit frames. Every route lives under `/api`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use relight_core::imagecore::{self, ToneMapParams};
use relight_core::lightrig::{env_to_weights, EnvMap, OlatStack, WeightVector};
use relight_core::relight::combine;
use relight_core::error::ErrorKind;
use relight_core::{Error, HdrImage};

pub const DEFAULT_MAX_ENV_BYTES: usize = 64 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Largest accepted environment upload in bytes.
    pub max_env_bytes: usize,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_env_bytes: DEFAULT_MAX_ENV_BYTES,
            cors_origin: None,
        }
    }
}

pub struct Session {
    pub id: String,
    pub stack: OlatStack,
    envs: RwLock<Vec<Arc<EnvMap>>>,
}

impl Session {
    pub fn new(id: String, stack: OlatStack) -> Self {
        Session {
            id,
            stack,
            envs: RwLock::new(Vec::new()),
        }
    }

    /// Registers an environment and returns its id.
    pub fn add_env(&self, env: EnvMap) -> String {
        let mut envs = self.envs.write().unwrap();
        envs.push(Arc::new(env));
        format!("env-{}", envs.len() - 1)
    }

    pub fn env(&self, id: &str) -> Option<Arc<EnvMap>> {
        let idx: usize = id.strip_prefix("env-")?.parse().ok()?;
        self.envs.read().unwrap().get(idx).cloned()
    }
}

pub struct AppState {
    sessions: Vec<Arc<Session>>,
    config: ServiceConfig,
}

impl AppState {
    /// Sessions take their id from the stack's session name, falling back to
    /// `session-<n>`; duplicates get a numeric suffix.
    pub fn new(stacks: Vec<OlatStack>, config: ServiceConfig) -> Self {
        let mut sessions: Vec<Arc<Session>> = Vec::with_capacity(stacks.len());
        for (i, stack) in stacks.into_iter().enumerate() {
            let base = if stack.session.is_empty() {
                format!("session-{i}")
            } else {
                stack.session.clone()
            };
            let mut id = base.clone();
            let mut n = 1;
            while sessions.iter().any(|s| s.id == id) {
                id = format!("{base}-{n}");
                n += 1;
            }
            sessions.push(Arc::new(Session::new(id, stack)));
        }
        AppState { sessions, config }
    }

    pub fn sessions(&self) -> &[Arc<Session>] {
        &self.sessions
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .iter()
            .find(|s| s.id == id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    kind: &'a str,
    message: &'a str,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            message,
        }
    }

    fn invalid(message: String) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            kind: "invalid_request",
            message,
        }
    }

    fn internal(message: String) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e.kind() {
            ErrorKind::Validation => ApiError::invalid(e.to_string()),
            ErrorKind::Io | ErrorKind::Numeric => ApiError::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        let body = ErrorBody {
            error: ErrorDetail {
                kind: self.kind,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("bad request body: {e}")))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn hdr_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/vnd.radiance")], bytes).into_response()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionInfo {
    pub id: String,
    pub subject: String,
    pub lights: usize,
    pub resolution: [usize; 2],
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<Vec<SessionInfo>> {
    Json(
        app.sessions
            .iter()
            .map(|s| SessionInfo {
                id: s.id.clone(),
                subject: s.stack.subject.clone(),
                lights: s.stack.len(),
                resolution: [s.stack.width(), s.stack.height()],
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LightInfo {
    pub index: usize,
    pub label: String,
    pub direction: [f64; 3],
}

async fn list_lights(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<LightInfo>>> {
    let s = app.session(&id)?;
    let rig = &s.stack.rig;
    Ok(Json(
        rig.directions()
            .iter()
            .zip(rig.labels())
            .enumerate()
            .map(|(index, (d, label))| LightInfo {
                index,
                label: label.clone(),
                direction: [d.x, d.y, d.z],
            })
            .collect(),
    ))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EnvInfo {
    pub env_id: String,
    pub width: usize,
    pub height: usize,
}

async fn upload_env(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<Json<EnvInfo>> {
    let s = app.session(&id)?;
    let body = body.map_err(|e| ApiError {
        status: e.status(),
        kind: if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            "too_large"
        } else {
            "invalid_request"
        },
        message: e.body_text(),
    })?;
    let env = blocking(move || Ok(EnvMap::new(imagecore::decode_hdr(&body)?)?)).await?;
    let (width, height) = (env.width(), env.height());
    let env_id = s.add_env(env);
    Ok(Json(EnvInfo { env_id, width, height }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsRequest {
    env_id: String,
    #[serde(default)]
    rotation: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightsResponse {
    pub weights: Vec<[f64; 3]>,
}

fn env_weights(s: &Session, env_id: &str, rotation: f64) -> ApiResult<WeightVector> {
    if !rotation.is_finite() {
        return Err(ApiError::invalid("rotation must be finite".into()));
    }
    let env = s
        .env(env_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown environment {env_id:?}")))?;
    Ok(env_to_weights(&env, &s.stack.rig, rotation))
}

async fn weights(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<WeightsResponse>> {
    let s = app.session(&id)?;
    let req: WeightsRequest = parse_json(&body)?;
    let w = blocking(move || env_weights(&s, &req.env_id, req.rotation)).await?;
    Ok(Json(WeightsResponse { weights: w.weights }))
}

fn default_gamma() -> f64 {
    ToneMapParams::default().gamma
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelightRequest {
    weights: Option<Vec<[f64; 3]>>,
    env_id: Option<String>,
    #[serde(default)]
    rotation: f64,
    #[serde(default)]
    exposure: f64,
    #[serde(default = "default_gamma")]
    gamma: f64,
    max_lights: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Hdr,
}

fn output_format(q: &HashMap<String, String>) -> ApiResult<Format> {
    match q.get("format").map(String::as_str) {
        None | Some("png") => Ok(Format::Png),
        Some("hdr") => Ok(Format::Hdr),
        Some(other) => Err(ApiError::invalid(format!("unknown format {other:?}"))),
    }
}

fn encode(img: &HdrImage, format: Format, tone: ToneMapParams) -> ApiResult<Response> {
    Ok(match format {
        Format::Png => png_response(imagecore::png_bytes(img, tone)?),
        Format::Hdr => hdr_response(imagecore::encode_hdr(img)?),
    })
}

async fn relight(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<Response> {
    let s = app.session(&id)?;
    let format = output_format(&q)?;
    let req: RelightRequest = parse_json(&body)?;
    let tone = ToneMapParams::new(req.exposure, req.gamma)?;
    blocking(move || {
        let mut w = match (req.weights, req.env_id) {
            (Some(list), None) => WeightVector::new(&s.stack.rig, list)?,
            (None, Some(env_id)) => env_weights(&s, &env_id, req.rotation)?,
            _ => return Err(ApiError::invalid("give exactly one of weights or env_id".into())),
        };
        if let Some(k) = req.max_lights {
            if k == 0 {
                return Err(ApiError::invalid("max_lights must be >= 1".into()));
            }
            w = w.truncate_top_k(k);
        }
        let img = combine(&s.stack, &w)?;
        encode(&img, format, tone)
    })
    .await
}

fn query_f64(q: &HashMap<String, String>, key: &str, default: f64) -> ApiResult<f64> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::invalid(format!("query parameter {key} must be a number"))),
    }
}

async fn olat(
    State(app): State<Arc<AppState>>,
    Path((id, index)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let s = app.session(&id)?;
    let index: usize = index
        .parse()
        .map_err(|_| ApiError::invalid(format!("light index {index:?} is not a number")))?;
    if index >= s.stack.len() {
        return Err(ApiError::not_found(format!("light {index} out of range")));
    }
    let tone = ToneMapParams::new(query_f64(&q, "exposure", 0.0)?, query_f64(&q, "gamma", default_gamma())?)?;
    let format = output_format(&q)?;
    blocking(move || {
        let img = s.stack.image(index)?;
        encode(&img, format, tone)
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match state.config.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(AllowOrigin::exact(origin)),
        _ => cors.allow_origin(Any),
    };
    let limit = state.config.max_env_bytes;
    Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/:id/lights", get(list_lights))
        .route("/api/sessions/:id/envs", post(upload_env).layer(DefaultBodyLimit::max(limit)))
        .route("/api/sessions/:id/weights", post(weights))
        .route("/api/sessions/:id/relight", post(relight))
        .route("/api/sessions/:id/olat/:index", get(olat))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
