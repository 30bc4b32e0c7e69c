//! HTTP service backing the annotation workflow: reference sampling, target
//! galleries, caption submission and multi-ground-truth selection.

pub mod http;
pub mod model;
pub mod service;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

pub use http::router;
pub use service::{AnnotationService, Resources, ServiceConfig, ServiceError};

/// Serves until `shutdown` resolves, then flushes the event log.
pub async fn serve(
    addr: SocketAddr,
    service: Arc<AnnotationService>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    service.flush().map_err(std::io::Error::other)?;
    Ok(())
}
