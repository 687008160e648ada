//! HTTP front end for the weight cache.
//!
//! `POST /rank` scores one user against the current snapshot, `POST /snapshot`
//! publishes a new generation from files on disk, `GET /stats` reports the
//! generation and request latency, `GET /healthz` is 200 once a snapshot is live.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coldstart_core::gateway::Exclusion;
use coldstart_core::jsonl::read_jsonl;
use coldstart_core::serve::{rank_request, read_serving_models, LatencyRecorder, LatencyStats, SnapshotInput, WeightCache};
use coldstart_core::{Error, FeatureVector, UserId};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const DEFAULT_K: usize = 10;

#[derive(Clone)]
pub struct AppState {
    pub cache: Arc<WeightCache>,
    pub latency: Arc<LatencyRecorder>,
    /// Per-feature thresholds used when a snapshot carries exclusions.
    pub thresholds: Option<Vec<f64>>,
    /// Bearer token required on `/rank` and `/snapshot` when set.
    pub token: Option<String>,
}

impl AppState {
    pub fn new(cache: Arc<WeightCache>) -> Self {
        Self { cache, latency: Arc::new(LatencyRecorder::default()), thresholds: None, token: None }
    }

    /// Loads models (and optionally exclusions) from disk and publishes them.
    pub fn load_files(&self, models: &PathBuf, exclusions: Option<&PathBuf>) -> coldstart_core::Result<u64> {
        let models = read_serving_models(models)?;
        let exclusions: Vec<Exclusion> = match exclusions {
            Some(p) => read_jsonl(p)?,
            None => Vec::new(),
        };
        let thresholds = if exclusions.is_empty() { None } else { self.thresholds.clone() };
        self.cache.load_snapshot(SnapshotInput { models, exclusions, thresholds })
    }
}

#[derive(Debug, Deserialize)]
pub struct RankBody {
    #[serde(default)]
    pub user_id: Option<String>,
    /// Non-bias feature values in schema order.
    pub features: Vec<f64>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct SnapshotBody {
    pub path: PathBuf,
    #[serde(default)]
    pub exclusions: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct StatsBody {
    pub generation: Option<u64>,
    pub ads: usize,
    pub requests: u64,
    pub latency: LatencyStats,
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            Error::SnapshotRejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Io { .. } => StatusCode::NOT_FOUND,
            Error::Schema(_) | Error::Domain(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({"error": self.0.to_string()}))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

async fn rank(State(state): State<AppState>, Json(body): Json<RankBody>) -> Result<Response, ApiError> {
    let user = FeatureVector::from_features(UserId::new(body.user_id.unwrap_or_else(|| "anonymous".into())), &body.features)?;
    let resp = rank_request(&state.cache, &user, body.k.unwrap_or(DEFAULT_K), Some(&state.latency))?;
    Ok(Json(resp).into_response())
}

async fn snapshot(State(state): State<AppState>, Json(body): Json<SnapshotBody>) -> Result<Response, ApiError> {
    let st = state.clone();
    let generation = tokio::task::spawn_blocking(move || st.load_files(&body.path, body.exclusions.as_ref()))
        .await
        .map_err(|e| ApiError(Error::Domain(format!("snapshot task failed: {e}"))))??;
    let ads = state.cache.snapshot().map_or(0, |s| s.len());
    Ok(Json(json!({"generation": generation, "ads": ads})).into_response())
}

async fn stats(State(state): State<AppState>) -> Json<StatsBody> {
    let snap = state.cache.snapshot();
    Json(StatsBody {
        generation: snap.as_ref().map(|s| s.generation),
        ads: snap.map_or(0, |s| s.len()),
        requests: state.latency.count(),
        latency: state.latency.report(),
    })
}

async fn healthz(State(state): State<AppState>) -> Response {
    match state.cache.generation() {
        Some(g) => (StatusCode::OK, Json(json!({"status": "ok", "generation": g}))).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "not ready"}))).into_response(),
    }
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return (StatusCode::UNAUTHORIZED, Json(json!({"error": "missing or wrong bearer token"}))).into_response();
        }
    }
    next.run(req).await
}

pub fn app(state: AppState) -> Router {
    let guarded = Router::new()
        .route("/rank", post(rank))
        .route("/snapshot", post(snapshot))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .merge(guarded)
        .route("/stats", get(stats))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves on `listener` until `shutdown` resolves.
pub async fn run(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app(state)).with_graceful_shutdown(shutdown).await
}
