//! Shared plumbing for mosden services: an injectable clock, an HTTP client
//! abstraction with a socket-free in-process implementation, and logging.

pub mod clock;
pub mod http;

pub use clock::Clock;
pub use http::{
    ErrorBody, HttpClient, HttpError, HttpResponse, ReqwestClient, RouterClient, SharedHttpClient,
};

/// Installs the global tracing subscriber. Verbosity comes from
/// `MOSDEN_LOG` (`debug`, `info` or `warn`), defaulting to `info`.
pub fn init_logging() {
    let level = std::env::var("MOSDEN_LOG").unwrap_or_else(|_| "info".to_string());
    let filter = tracing_subscriber::EnvFilter::try_new(&level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
