//! JSON-over-HTTP adjudication service.
//!
//! | method | path            | body / reply                                        |
//! |--------|-----------------|-----------------------------------------------------|
//! | GET    | `/queue?page=N` | `QueuePage`; undecided items only, pages from 0     |
//! | GET    | `/image/{id}`   | image bytes for local refs; 422 for remote refs     |
//! | POST   | `/decision`     | `DecisionRequest` in, stored `ReviewDecision` out   |
//! | GET    | `/progress`     | `Progress`                                          |
//! | GET    | `/export`       | latest decision per sample as JSONL, sorted by id   |
//!
//! When a token is configured every API call needs `Authorization: Bearer <token>`.

use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use kindersafe::images::{is_remote, LocalImages};
use kindersafe::review::{
    export_decisions, ReviewChoice, ReviewDecision, ReviewError, ReviewQueue, ReviewQueueItem, ReviewStore, QUEUE_FILE,
    REVIEW_LOG_FILE,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOKEN_ENV: &str = "KINDERSAFE_REVIEW_TOKEN";
pub const DEFAULT_BIND: &str = "127.0.0.1:8787";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("server error: {0}")]
    Serve(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub queue_path: PathBuf,
    pub decisions_path: PathBuf,
    pub image_root: PathBuf,
    pub bind: SocketAddr,
    pub static_dir: Option<PathBuf>,
    pub token: Option<String>,
}

impl ServiceConfig {
    /// Queue and review log inside a run directory; token from the environment.
    pub fn for_run(run_dir: &Path) -> Self {
        Self {
            queue_path: run_dir.join(QUEUE_FILE),
            decisions_path: run_dir.join(REVIEW_LOG_FILE),
            image_root: PathBuf::from("."),
            bind: DEFAULT_BIND.parse().expect("valid default"),
            static_dir: None,
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        }
    }
}

pub struct AppState {
    queue: ReviewQueue,
    store: RwLock<ReviewStore>,
    images: LocalImages,
    token: Option<String>,
}

impl AppState {
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        Ok(Self {
            queue: ReviewQueue::load(&config.queue_path)?,
            store: RwLock::new(ReviewStore::open(&config.decisions_path)?),
            images: LocalImages::new(&config.image_root),
            token: config.token.clone(),
        })
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(default)]
    pub page: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueuePage {
    pub page: usize,
    pub page_size: usize,
    pub page_count: usize,
    pub pending: usize,
    pub items: Vec<ReviewQueueItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub sample_id: String,
    pub decision: ReviewChoice,
    pub reviewer_id: String,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub decided: usize,
    pub pending: usize,
    pub keep: usize,
    pub remove: usize,
    pub uncertain: usize,
}

async fn get_queue(State(state): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> Json<QueuePage> {
    let store = state.store.read().expect("store lock");
    let pending: Vec<&ReviewQueueItem> = state.queue.items.iter().filter(|i| !store.is_decided(&i.sample_id)).collect();
    let size = state.queue.page_size;
    let items = pending.iter().skip(q.page.saturating_mul(size)).take(size).map(|i| (*i).clone()).collect();
    Json(QueuePage { page: q.page, page_size: size, page_count: pending.len().div_ceil(size), pending: pending.len(), items })
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let item = state.queue.get(&id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("{id:?} is not queued")))?;
    if is_remote(&item.image_ref) {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "remote image; open the link instead".into()));
    }
    let path = state
        .images
        .resolve(&item.image_ref)
        .ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, "image reference not servable".into()))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        tracing::warn!(sample = %id, error = %e, "image read failed");
        ApiError(StatusCode::NOT_FOUND, "image unreadable".into())
    })?;
    let mut resp = bytes.into_response();
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type(&path)));
    resp.headers_mut().insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
    Ok(resp)
}

async fn post_decision(
    State(state): State<Arc<AppState>>,
    Json(req): Json<DecisionRequest>,
) -> Result<Json<ReviewDecision>, ApiError> {
    if !state.queue.contains(&req.sample_id) {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("{:?} is not queued", req.sample_id)));
    }
    let decision = ReviewDecision {
        sample_id: req.sample_id,
        decision: req.decision,
        reviewer_id: req.reviewer_id,
        timestamp: req.timestamp.unwrap_or_else(Utc::now),
        note: req.note,
    };
    let mut store = state.store.write().expect("store lock");
    store.append(decision.clone()).map_err(|e| match e {
        ReviewError::Invalid(msg) => ApiError(StatusCode::BAD_REQUEST, msg),
        other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    tracing::info!(sample = %decision.sample_id, decision = ?decision.decision, "decision recorded");
    Ok(Json(decision))
}

fn progress(state: &AppState) -> Progress {
    let store = state.store.read().expect("store lock");
    let mut p = Progress { total: state.queue.items.len(), decided: 0, pending: 0, keep: 0, remove: 0, uncertain: 0 };
    for item in &state.queue.items {
        match store.latest(&item.sample_id).map(|d| d.decision) {
            Some(ReviewChoice::Keep) => p.keep += 1,
            Some(ReviewChoice::Remove) => p.remove += 1,
            Some(ReviewChoice::Uncertain) => p.uncertain += 1,
            None => {}
        }
    }
    p.decided = p.keep + p.remove;
    p.pending = p.total - p.decided;
    p
}

async fn get_progress(State(state): State<Arc<AppState>>) -> Json<Progress> {
    Json(progress(&state))
}

async fn get_export(State(state): State<Arc<AppState>>) -> Response {
    let store = state.store.read().expect("store lock");
    let mut body = String::new();
    for d in export_decisions(&store) {
        body.push_str(&serde_json::to_string(&d).expect("serializable"));
        body.push('\n');
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong token".into()).into_response();
        }
    }
    next.run(req).await
}

pub fn app(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/queue", get(get_queue))
        .route("/image/{id}", get(get_image))
        .route("/decision", post(post_decision))
        .route("/progress", get(get_progress))
        .route("/export", get(get_export))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds the listener and returns the bound address with the server future.
pub async fn bind(config: &ServiceConfig) -> Result<(SocketAddr, impl Future<Output = std::io::Result<()>>), ServiceError> {
    let state = Arc::new(AppState::open(config)?);
    if !config.bind.ip().is_loopback() {
        tracing::warn!(addr = %config.bind, "review service bound to a non-loopback address");
    }
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServiceError::BindFailure { addr: config.bind, source })?;
    let addr = listener.local_addr()?;
    let router = app(state, config.static_dir.as_deref());
    Ok((addr, async move { axum::serve(listener, router).await }))
}

pub async fn serve(config: &ServiceConfig) -> Result<(), ServiceError> {
    let (addr, server) = bind(config).await?;
    tracing::info!(%addr, "review service listening");
    server.await?;
    Ok(())
}
