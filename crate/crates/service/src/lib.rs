//! HTTP review service.
//!
//! Uploaded slides become sessions keyed by the SHA-256 of their bytes. The
//! pipeline runs in the background; once Ready, reviewers override nucleus
//! decisions or scoring thresholds and get the re-graded report back.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/slides` | raw image body, or JSON `{"image": base64, "config": {...}}` |
//! | GET | `/slides/{id}` | session state and progress |
//! | GET | `/slides/{id}/report` | 200 report, 202 while processing |
//! | PATCH | `/slides/{id}/nuclei/{nid}` | `{"action": "exclude" \| "include" \| "set_class", "class": ...}` |
//! | PUT | `/slides/{id}/config` | scoring configuration |
//! | GET | `/slides/{id}/overlay?layer=nuclei\|signals\|cam&nucleus=N` | PNG |
//! | GET | `/healthz` | `ok` |

mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use base64::Engine;
use fishgrade_core::classify::NucleusClass;
use fishgrade_core::overlay::{encode_png, render_cam, render_overlay, Layer};
use fishgrade_core::pipeline::PipelineConfig;
use fishgrade_core::report::{ReviewAction, ReviewChange, SlideReport, SCHEMA};
use fishgrade_core::scoring::ScoringConfig;
use serde::Deserialize;
use serde_json::json;

pub use error::ApiError;
use store::{Session, Store, View};

pub const SCHEMA_HEADER: &str = "x-fishgrade-schema";
pub const ACTOR_HEADER: &str = "x-fishgrade-actor";
/// Number of signal boxes drawn on a signals-layer overlay.
pub const BOXES_HEADER: &str = "x-fishgrade-boxes";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Session persistence; `None` keeps sessions in memory only.
    pub data_dir: Option<PathBuf>,
    /// Static bearer token required on every route except `/healthz`.
    pub token: Option<String>,
    /// Pipeline configuration for uploads that do not carry one.
    pub defaults: PipelineConfig,
    pub body_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { data_dir: None, token: None, defaults: PipelineConfig::default(), body_limit: 512 << 20 }
    }
}

struct AppState {
    store: Store,
    token: Option<String>,
    defaults: PipelineConfig,
}

type Shared = Arc<AppState>;

/// Builds the router, reloading persisted sessions first. Must run inside a
/// Tokio runtime.
pub fn app(cfg: ServiceConfig) -> std::io::Result<Router> {
    let store = match &cfg.data_dir {
        Some(dir) => Store::open(dir.clone())?,
        None => Store::new(None),
    };
    let state = Arc::new(AppState { store, token: cfg.token, defaults: cfg.defaults });
    Ok(Router::new()
        .route("/slides", post(create_slide))
        .route("/slides/{id}", get(get_session))
        .route("/slides/{id}/report", get(get_report))
        .route("/slides/{id}/nuclei/{nid}", patch(override_nucleus))
        .route("/slides/{id}/config", put(update_config))
        .route("/slides/{id}/overlay", get(get_overlay))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/healthz", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(cfg.body_limit))
        .layer(middleware::map_response(schema_header))
        .with_state(state))
}

pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let router = app(cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router).await
}

async fn schema_header(mut res: Response) -> Response {
    res.headers_mut().insert(SCHEMA_HEADER, HeaderValue::from_static(SCHEMA));
    res
}

async fn require_token(State(st): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

fn session(st: &AppState, id: &str) -> Result<Arc<Session>, ApiError> {
    st.store.get(id).ok_or_else(|| ApiError::NotFound(format!("unknown slide {id}")))
}

async fn ready_report(s: &Session) -> Result<Box<SlideReport>, ApiError> {
    match s.view().await {
        View::Ready(r) => Ok(r),
        View::Processing(_) => Err(ApiError::Conflict(format!("slide {} is still processing", s.id))),
        View::Failed(e) => Err(ApiError::Conflict(format!("slide {} failed: {e}", s.id))),
    }
}

#[derive(Deserialize)]
struct Upload {
    image: String,
    #[serde(default)]
    config: Option<PipelineConfig>,
}

async fn create_slide(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let (bytes, config) = if is_json {
        let up: Upload = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("upload body: {e}")))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(up.image.as_bytes())
            .map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
        (Bytes::from(bytes), up.config.unwrap_or_else(|| st.defaults.clone()))
    } else {
        (body, st.defaults.clone())
    };
    if bytes.is_empty() {
        return Err(ApiError::BadRequest("empty upload".into()));
    }
    let (s, created) = st.store.create(&bytes, config)?;
    let code = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((code, Json(json!({ "id": s.id, "state": state_name(&s.view().await) }))).into_response())
}

fn state_name(v: &View) -> &'static str {
    match v {
        View::Processing(_) => "processing",
        View::Ready(_) => "ready",
        View::Failed(_) => "failed",
    }
}

async fn get_session(State(st): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = session(&st, &id)?;
    let v = s.view().await;
    let mut body = json!({ "id": s.id, "state": state_name(&v), "progress": s.progress() });
    if let View::Failed(e) = &v {
        body["error"] = json!(e);
    }
    Ok(Json(body).into_response())
}

async fn get_report(State(st): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = session(&st, &id)?;
    match s.view().await {
        View::Ready(r) => Ok(report_response(&r)),
        View::Processing(p) => Ok((StatusCode::ACCEPTED, Json(json!({ "id": s.id, "state": "processing", "progress": p }))).into_response()),
        View::Failed(e) => Err(ApiError::Internal(format!("pipeline failed: {e}"))),
    }
}

fn report_response(r: &SlideReport) -> Response {
    match r.to_json() {
        Ok(text) => ([(header::CONTENT_TYPE, "application/json")], text).into_response(),
        Err(e) => ApiError::Internal(e.to_string()).into_response(),
    }
}

fn actor(headers: &HeaderMap) -> String {
    headers.get(ACTOR_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("anonymous").to_string()
}

/// Parses a PATCH body; anything malformed is a 422.
fn parse_action(body: &[u8]) -> Result<ReviewAction, ApiError> {
    let v: serde_json::Value = serde_json::from_slice(body).map_err(|e| ApiError::Unprocessable(format!("body: {e}")))?;
    match v.get("action").and_then(|a| a.as_str()) {
        Some("exclude") => Ok(ReviewAction::Exclude),
        Some("include") => Ok(ReviewAction::Include),
        Some("set_class") => {
            let name = v.get("class").and_then(|c| c.as_str()).ok_or_else(|| ApiError::Unprocessable("set_class needs a class".into()))?;
            let class: NucleusClass = name.parse().map_err(|_| ApiError::Unprocessable(format!("invalid class {name:?}")))?;
            Ok(ReviewAction::SetClass { class })
        }
        other => Err(ApiError::Unprocessable(format!("unknown action {other:?}"))),
    }
}

async fn override_nucleus(
    State(st): State<Shared>,
    Path((id, nid)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let s = session(&st, &id)?;
    let nucleus_id: usize = nid.parse().map_err(|_| ApiError::NotFound(format!("unknown nucleus {nid}")))?;
    let action = parse_action(&body)?;
    let report = s.apply(&actor(&headers), ReviewChange::Nucleus { nucleus_id, action }).await?;
    Ok(report_response(&report))
}

async fn update_config(State(st): State<Shared>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let s = session(&st, &id)?;
    let scoring: ScoringConfig = serde_json::from_slice(&body).map_err(|e| ApiError::Unprocessable(format!("scoring config: {e}")))?;
    scoring.validate().map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let report = s.apply(&actor(&headers), ReviewChange::Scoring { scoring }).await?;
    Ok(report_response(&report))
}

#[derive(Deserialize)]
struct OverlayQuery {
    #[serde(default)]
    layer: Option<String>,
    #[serde(default)]
    nucleus: Option<usize>,
}

async fn get_overlay(State(st): State<Shared>, Path(id): Path<String>, Query(q): Query<OverlayQuery>) -> Result<Response, ApiError> {
    let s = session(&st, &id)?;
    let report = ready_report(&s).await?;
    let image = s.image.clone();
    let layer = q.layer.unwrap_or_else(|| "nuclei".into());
    let (png, boxes) = tokio::task::spawn_blocking(move || -> Result<(Vec<u8>, Option<usize>), ApiError> {
        match layer.as_str() {
            "nuclei" | "signals" | "all" => {
                let l = match layer.as_str() {
                    "nuclei" => Layer::Nuclei,
                    "signals" => Layer::Signals,
                    _ => Layer::All,
                };
                let (img, stats) = render_overlay(&image, &report, l);
                Ok((encode_png(&img)?, Some(stats.boxes)))
            }
            "cam" => {
                let nid = q.nucleus.ok_or_else(|| ApiError::Unprocessable("cam layer needs ?nucleus=<id>".into()))?;
                Ok((encode_png(&render_cam(&image, &report, nid)?)?, None))
            }
            other => Err(ApiError::Unprocessable(format!("unknown layer {other:?}"))),
        }
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let mut res = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    if let Some(n) = boxes {
        res.headers_mut().insert(BOXES_HEADER, HeaderValue::from(n));
    }
    Ok(res)
}
