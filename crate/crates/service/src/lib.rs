//! HTTP service around a trained inpainting checkpoint.
//!
//! Each session holds one input image and mask, its encoded style code, a latent seed and a
//! list of edits. Every response carries the composed completion as a base64 PNG; payloads
//! are described in `API.md`.

mod error;
mod session;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

pub use error::{ApiError, ErrorBody, ErrorCode};
pub use session::{DirectionInfo, EditEntry, Engine, Health, Service, ServiceConfig, SessionView};

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ResampleRequest {
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
pub struct EditRequest {
    pub direction: String,
    pub strength: f64,
}

type Shared = Arc<Service>;

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> Result<R, ApiError> + Send + 'static) -> Result<Json<R>, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?.map(Json)
}

async fn create(State(svc): State<Shared>, Json(req): Json<CreateRequest>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || svc.create_session(&req.image, &req.mask, req.seed)).await
}

async fn show(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || svc.get_session(&id)).await
}

async fn resample(State(svc): State<Shared>, Path(id): Path<String>, body: Option<Json<ResampleRequest>>) -> Result<Json<SessionView>, ApiError> {
    let seed = body.and_then(|b| b.0.seed);
    blocking(move || svc.resample(&id, seed)).await
}

async fn edit(State(svc): State<Shared>, Path(id): Path<String>, Json(req): Json<EditRequest>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || svc.edit(&id, &req.direction, req.strength)).await
}

async fn directions(State(svc): State<Shared>) -> Result<Json<Vec<DirectionInfo>>, ApiError> {
    svc.directions().map(Json)
}

async fn health(State(svc): State<Shared>) -> Json<Health> {
    Json(svc.health())
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/directions", get(directions))
        .route("/sessions", post(create))
        .route("/sessions/:id", get(show))
        .route("/sessions/:id/resample", post(resample))
        .route("/sessions/:id/edit", post(edit))
        .with_state(svc)
}

/// Binds `0.0.0.0:port` and serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> Result<(), String> {
    let svc = Arc::new(Service::from_config(&cfg)?);
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("bind {addr}: {e}"))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(svc)).await.map_err(|e| e.to_string())
}
