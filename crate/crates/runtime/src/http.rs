//! Outbound HTTP used for push delivery, peer pulls and registry dispatch.
//!
//! [`ReqwestClient`] talks to real sockets. [`RouterClient`] dispatches
//! requests straight into in-process axum routers by URL authority, which
//! keeps whole multi-service topologies on a paused (virtual) clock.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::body::Body;
use axum::http::{header, Method, Request};
use axum::Router;
use bytes::Bytes;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower::ServiceExt;
use url::Url;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HttpError {
    #[error("invalid URL {0}")]
    BadUrl(String),
    #[error("cannot reach {url}: {detail}")]
    Unreachable { url: String, detail: String },
    #[error("request to {url} timed out")]
    Timeout { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Bytes,
}

impl HttpResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn json(&self) -> Option<serde_json::Value> {
        serde_json::from_slice(&self.body).ok()
    }

    /// Parsed `{"error": ..., "detail": ...}` body, if any.
    pub fn error_body(&self) -> Option<ErrorBody> {
        serde_json::from_slice(&self.body).ok()
    }
}

/// Machine-readable error body returned by every service endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

impl ErrorBody {
    pub fn new(error: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            error: error.into(),
            detail: detail.into(),
        }
    }
}

#[async_trait]
pub trait HttpClient: Send + Sync {
    async fn send(
        &self,
        method: Method,
        url: &str,
        body: Option<Vec<u8>>,
    ) -> Result<HttpResponse, HttpError>;

    async fn get(&self, url: &str) -> Result<HttpResponse, HttpError> {
        self.send(Method::GET, url, None).await
    }

    async fn post_json(&self, url: &str, body: Vec<u8>) -> Result<HttpResponse, HttpError> {
        self.send(Method::POST, url, Some(body)).await
    }

    async fn delete(&self, url: &str) -> Result<HttpResponse, HttpError> {
        self.send(Method::DELETE, url, None).await
    }
}

pub type SharedHttpClient = Arc<dyn HttpClient>;

#[derive(Debug, Clone)]
pub struct ReqwestClient {
    inner: reqwest::Client,
}

impl ReqwestClient {
    pub fn new(timeout: Duration) -> Self {
        let inner = reqwest::Client::builder()
            .timeout(timeout)
            .pool_max_idle_per_host(64)
            .build()
            .expect("plain HTTP client builds");
        Self { inner }
    }
}

impl Default for ReqwestClient {
    fn default() -> Self {
        Self::new(Duration::from_secs(5))
    }
}

#[async_trait]
impl HttpClient for ReqwestClient {
    async fn send(
        &self,
        method: Method,
        url: &str,
        body: Option<Vec<u8>>,
    ) -> Result<HttpResponse, HttpError> {
        let mut req = self.inner.request(method, url);
        if let Some(b) = body {
            req = req.header(header::CONTENT_TYPE, "application/json").body(b);
        }
        let resp = req.send().await.map_err(|e| classify(url, &e))?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await.map_err(|e| classify(url, &e))?;
        Ok(HttpResponse { status, body })
    }
}

fn classify(url: &str, e: &reqwest::Error) -> HttpError {
    if e.is_timeout() {
        HttpError::Timeout {
            url: url.to_string(),
        }
    } else if e.is_builder() {
        HttpError::BadUrl(url.to_string())
    } else {
        HttpError::Unreachable {
            url: url.to_string(),
            detail: e.to_string(),
        }
    }
}

/// In-process client: routes by `host:port` to registered routers. Hosts
/// that are not mounted (or were unmounted) behave like a refused connection.
#[derive(Clone, Default)]
pub struct RouterClient {
    routes: Arc<RwLock<HashMap<String, Router>>>,
}

impl RouterClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mounts `router` at `base_url`'s authority.
    pub fn mount(&self, base_url: &str, router: Router) {
        let key = authority(base_url).unwrap_or_else(|| base_url.to_string());
        self.routes.write().insert(key, router);
    }

    pub fn unmount(&self, base_url: &str) {
        let key = authority(base_url).unwrap_or_else(|| base_url.to_string());
        self.routes.write().remove(&key);
    }
}

fn authority(url: &str) -> Option<String> {
    let u = Url::parse(url).ok()?;
    Some(format!("{}:{}", u.host_str()?, u.port_or_known_default()?))
}

#[async_trait]
impl HttpClient for RouterClient {
    async fn send(
        &self,
        method: Method,
        url: &str,
        body: Option<Vec<u8>>,
    ) -> Result<HttpResponse, HttpError> {
        let parsed = Url::parse(url).map_err(|_| HttpError::BadUrl(url.to_string()))?;
        let key = authority(url).ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
        let router = self
            .routes
            .read()
            .get(&key)
            .cloned()
            .ok_or_else(|| HttpError::Unreachable {
                url: url.to_string(),
                detail: "connection refused".into(),
            })?;
        let mut path = parsed.path().to_string();
        if let Some(q) = parsed.query() {
            path.push('?');
            path.push_str(q);
        }
        let mut builder = Request::builder().method(method).uri(path);
        if body.is_some() {
            builder = builder.header(header::CONTENT_TYPE, "application/json");
        }
        let req = builder
            .body(body.map_or_else(Body::empty, Body::from))
            .map_err(|_| HttpError::BadUrl(url.to_string()))?;
        let resp = router.oneshot(req).await.unwrap_or_else(|e| match e {});
        let status = resp.status().as_u16();
        let body = axum::body::to_bytes(resp.into_body(), usize::MAX)
            .await
            .map_err(|e| HttpError::Unreachable {
                url: url.to_string(),
                detail: e.to_string(),
            })?;
        Ok(HttpResponse { status, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::extract::Query;
    use axum::routing::{get, post};

    fn app() -> Router {
        Router::new()
            .route(
                "/echo",
                post(|body: Bytes| async move { body }),
            )
            .route(
                "/q",
                get(|Query(q): Query<HashMap<String, String>>| async move {
                    q.get("x").cloned().unwrap_or_default()
                }),
            )
    }

    #[tokio::test]
    async fn router_client_dispatches_by_authority() {
        let c = RouterClient::new();
        c.mount("http://node-a:8080", app());
        let r = c.post_json("http://node-a:8080/echo", b"{}".to_vec()).await.unwrap();
        assert_eq!((r.status, &r.body[..]), (200, &b"{}"[..]));
        let r = c.get("http://node-a:8080/q?x=7").await.unwrap();
        assert_eq!(&r.body[..], b"7");
        let r = c.get("http://node-a:8080/missing").await.unwrap();
        assert_eq!(r.status, 404);
        assert!(matches!(
            c.get("http://node-b:8080/q").await,
            Err(HttpError::Unreachable { .. })
        ));
        c.unmount("http://node-a:8080");
        assert!(c.get("http://node-a:8080/q").await.is_err());
    }

    #[tokio::test]
    async fn reqwest_client_reports_refused() {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let c = ReqwestClient::new(Duration::from_secs(2));
        assert!(matches!(
            c.get(&format!("http://{addr}/")).await,
            Err(HttpError::Unreachable { .. })
        ));
    }

    #[tokio::test]
    async fn reqwest_client_round_trip() {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app()).await.unwrap() });
        let c = ReqwestClient::default();
        let r = c
            .post_json(&format!("http://{addr}/echo"), b"[1]".to_vec())
            .await
            .unwrap();
        assert!(r.is_success());
        assert_eq!(r.json(), Some(serde_json::json!([1])));
    }
}
