//! Cloud-side companion of mosden nodes: keeps the sensor descriptor
//! registry, turns user requests into push subscriptions on matching nodes
//! and sinks the delivered streams into per-request JSON-lines logs.

pub mod api;
mod service;
mod table;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use mosden_runtime::{Clock, ReqwestClient};

pub use service::{
    DispatchError, DispatchFailure, DispatchedSubscription, IngestError, IngestOutcome, Registry,
    RegistryOptions, RegistryStats, RequestRecord, UserRequest, DEFAULT_LIVENESS_MS,
    QUARANTINE_FILE, RESULTS_DIR, SNAPSHOT_FILE,
};
pub use table::{Criteria, InvalidRegistration, RecordTable, RegistryRecord};

/// Serves the registry on `listen` until ctrl-c.
pub async fn run_registry(
    listen: SocketAddr,
    data_dir: PathBuf,
    public_url: Option<String>,
    liveness_ms: i64,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let registry = Registry::open(RegistryOptions {
        clock: Clock::system(),
        http: Arc::new(ReqwestClient::default()),
        data_dir,
        public_url: public_url.unwrap_or_else(|| format!("http://{addr}")),
        liveness_ms,
    })?;
    tracing::info!(%addr, "registry listening");
    axum::serve(listener, api::router(registry.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    registry.persist();
    Ok(())
}
