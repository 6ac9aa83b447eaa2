//! HTTP front end for the two-tier relevance service.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use forge_core::serving::{RelevanceService, Tier};

#[derive(Debug, Deserialize)]
pub struct ScoreRequest {
    pub query: String,
    pub item_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub relevant: bool,
    pub tier: Tier,
    pub snapshot: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct SwapRequest {
    pub snapshot: PathBuf,
}

type Shared = Arc<RelevanceService>;

async fn score(State(svc): State<Shared>, Json(req): Json<ScoreRequest>) -> Response {
    let result = tokio::task::spawn_blocking(move || svc.score_with_fallback(&req.query, &req.item_id)).await;
    match result {
        Ok(Ok(r)) => Json(ScoreResponse {
            score: r.score,
            relevant: r.relevant(),
            tier: r.tier,
            snapshot: r.snapshot_version,
        })
        .into_response(),
        Ok(Err(e)) => {
            let status = if e.code == "unknown_item" {
                StatusCode::NOT_FOUND
            } else {
                StatusCode::INTERNAL_SERVER_ERROR
            };
            (status, Json(json!({ "tier": "online", "code": e.code, "message": e.message }))).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "code": "panic", "message": e.to_string() })))
            .into_response(),
    }
}

async fn healthz(State(svc): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "snapshot": svc.snapshot().version() }))
}

async fn metrics(State(svc): State<Shared>) -> Json<forge_core::serving::ServiceMetrics> {
    Json(svc.metrics())
}

async fn swap(State(svc): State<Shared>, Json(req): Json<SwapRequest>) -> Response {
    match tokio::task::spawn_blocking(move || svc.swap_from_path(&req.snapshot)).await {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(e)) => (StatusCode::CONFLICT, Json(json!({ "code": "swap_refused", "message": e.to_string() })))
            .into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "code": "panic", "message": e.to_string() })))
            .into_response(),
    }
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .route("/admin/swap", post(swap))
        .with_state(service)
}

/// Serves until Ctrl-C. `on_bound` receives the actual listening address.
pub fn serve(service: Shared, listen: &str, on_bound: impl FnOnce(std::net::SocketAddr)) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        on_bound(listener.local_addr()?);
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
