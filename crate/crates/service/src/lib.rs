//! HTTP gateway in front of the gated cascade.
//!
//! Endpoints: `POST /score`, `PUT /config/gate` (and `GET` for the current
//! policy), `GET /stats`. Stage-2 clients can be in-process models or a
//! remote model server reached over HTTP.

pub mod config;
pub mod gateway;
pub mod remote;

use std::net::SocketAddr;
use std::sync::Arc;

pub use config::{build_classifier, ConfigError, ServiceConfig};
pub use gateway::{router, Gateway, GatewayStats, RequestLogEntry, ScoreRequest, ScoreResponse};

/// Binds `addr` and serves the gateway until the task is dropped. Returns
/// the bound address (useful with port 0) and the server future.
pub async fn bind(
    addr: SocketAddr,
    gateway: Arc<Gateway>,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(gateway);
    Ok((local, async move { axum::serve(listener, app).await }))
}
