//! HTTP and server-sent-event front end for interactive labeling sessions.

pub mod error;
pub mod routes;
pub mod snapshot;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;

pub use error::{ApiError, ApiResult};
pub use snapshot::{decode_snapshot, encode_snapshot, Snapshot, SnapshotError, SnapshotMeta};
pub use state::{AppState, ServerConfig, ServerEvent};

/// Uploaded PLY text for large clouds easily exceeds axum's 2 MB default.
const BODY_LIMIT: usize = 512 * 1024 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/clouds", get(routes::list_clouds).post(routes::add_cloud))
        .route("/sessions", post(routes::create_session))
        .route("/sessions/{id}", get(routes::get_session))
        .route("/sessions/{id}/seeds", post(routes::seeds))
        .route("/sessions/{id}/grow-preview", post(routes::grow_preview))
        .route("/sessions/{id}/train", post(routes::train))
        .route("/sessions/{id}/corrections", post(routes::corrections))
        .route("/sessions/{id}/finalize", post(routes::finalize))
        .route("/sessions/{id}/events", get(routes::events))
        .route("/sessions/{id}/log", get(routes::event_log))
        .route("/metrics/{id}", get(routes::metrics))
        .fallback(routes::not_found)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
