//! Annotation collection service.
//!
//! Workers open a session with an opaque token, receive one grid at a time,
//! and submit a full clustering with a description per group. Accepted
//! clusterings go to an append-only log that exports as a training dataset.

pub mod config;
pub mod error;
pub mod http;
pub mod service;
pub mod store;

use std::sync::Arc;

pub use config::{GridSource, ServiceConfig};
pub use error::{FieldError, Result, ServiceError};
pub use service::{Acknowledgement, GridAssignment, GridStatus, Progress, Service};

/// Binds `config.listen` and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    let listen = config.listen.clone();
    let service = Arc::new(Service::open(config)?);
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, http::router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Runs [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(config: ServiceConfig) -> Result<()> {
    tokio::runtime::Runtime::new()?.block_on(serve(config))
}
