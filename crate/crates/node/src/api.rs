//! HTTP surface of a node.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use mosden_core::element::element_to_json;
use mosden_core::{parse_vsd, SubscriptionRequest, WindowKind, WindowSpec};
use mosden_runtime::ErrorBody;
use serde_json::Value as Json_;

use crate::engine::EngineError;
use crate::node::{Node, NodeError};
use crate::plugin_host::HostError;
use crate::subscriptions::SubscriptionError;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody::new(code, detail),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<SubscriptionError> for ApiError {
    fn from(e: SubscriptionError) -> Self {
        let status = match e {
            SubscriptionError::UnknownVirtualSensor(_) | SubscriptionError::UnknownSubscription(_) => {
                StatusCode::NOT_FOUND
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        let detail = e.to_string();
        match e {
            NodeError::Peer(p) => ApiError::new(StatusCode::BAD_GATEWAY, p.code(), detail),
            NodeError::Vsd(_) => ApiError::new(StatusCode::BAD_REQUEST, "InvalidVsd", detail),
            NodeError::Engine(e) => {
                let (status, code) = match e {
                    EngineError::UnknownVirtualSensor(_) => (StatusCode::NOT_FOUND, "UnknownVirtualSensor"),
                    EngineError::DuplicateVirtualSensor(_) => (StatusCode::CONFLICT, "DuplicateVirtualSensor"),
                    EngineError::FieldNotInSchema(_) => (StatusCode::BAD_REQUEST, "FieldNotInSchema"),
                    EngineError::SchemaMismatch(_) => (StatusCode::BAD_REQUEST, "SchemaMismatch"),
                    EngineError::Host(HostError::UnknownPlugin(_)) => (StatusCode::BAD_REQUEST, "UnknownPlugin"),
                    EngineError::Host(HostError::PluginRejectedConfig(_)) => {
                        (StatusCode::BAD_REQUEST, "PluginRejectedConfig")
                    }
                    EngineError::Host(HostError::PluginTimeout { .. }) => {
                        (StatusCode::GATEWAY_TIMEOUT, "PluginTimeout")
                    }
                    EngineError::Host(_) => (StatusCode::BAD_GATEWAY, "PluginProtocolError"),
                    EngineError::Journal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "JournalError"),
                };
                ApiError::new(status, code, detail)
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(node: Arc<Node>) -> Router {
    let data = Router::new()
        .route("/sensors/{name}/data", get(pull_data))
        .layer(middleware::from_fn_with_state(node.clone(), record_l2));
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sensors", get(list_sensors).post(activate_sensor))
        .route("/sensors/{name}", delete(deactivate_sensor))
        .route("/subscriptions", get(list_subscriptions).post(create_subscription))
        .route("/subscriptions/{id}", delete(delete_subscription).get(get_subscription))
        .route("/metrics", get(metrics))
        .merge(data)
        .with_state(node)
}

async fn record_l2(State(node): State<Arc<Node>>, req: Request, next: Next) -> Response {
    let start = Instant::now();
    let resp = next.run(req).await;
    node.record_l2(start.elapsed());
    resp
}

async fn healthz(State(node): State<Arc<Node>>) -> Json<Json_> {
    Json(serde_json::json!({"status": "ok", "node_id": node.node_id()}))
}

async fn list_sensors(State(node): State<Arc<Node>>) -> Response {
    Json(node.descriptors()).into_response()
}

async fn activate_sensor(State(node): State<Arc<Node>>, body: Bytes) -> ApiResult<Response> {
    let vsd = parse_vsd(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidVsd", e.to_string()))?;
    let sensor = node.activate(vsd).await?;
    Ok((StatusCode::CREATED, Json(sensor.descriptor(node.node_id()))).into_response())
}

async fn deactivate_sensor(State(node): State<Arc<Node>>, Path(name): Path<String>) -> ApiResult<StatusCode> {
    node.deactivate(&name).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Parses `window_kind` / `window_size`; both or neither must be given.
fn window_override(q: &HashMap<String, String>) -> ApiResult<Option<WindowSpec>> {
    let bad = |d: String| ApiError::new(StatusCode::BAD_REQUEST, "BadWindow", d);
    match (q.get("window_kind"), q.get("window_size")) {
        (None, None) => Ok(None),
        (Some(k), Some(s)) => {
            let kind = match k.as_str() {
                "count" => WindowKind::Count,
                "time" => WindowKind::Time,
                other => return Err(bad(format!("unknown window kind {other:?}"))),
            };
            let size: u64 = s
                .parse()
                .map_err(|_| bad(format!("window_size {s:?} is not a positive integer")))?;
            WindowSpec::new(kind, size).map(Some).map_err(|e| bad(e.to_string()))
        }
        _ => Err(bad("window_kind and window_size go together".into())),
    }
}

async fn pull_data(
    State(node): State<Arc<Node>>,
    Path(name): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let sensor = node.engine().get(&name).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownVirtualSensor",
            format!("no virtual sensor named {name:?}"),
        )
    })?;
    let window = window_override(&q)?;
    let now = node.clock().now_ms();
    let schema = sensor.schema();
    let body = match q.get("mode").map_or("latest", String::as_str) {
        "latest" => {
            let store = sensor.store();
            match store.latest() {
                Some(e) => element_to_json(schema, e).expect("stored elements match the schema"),
                None => Json_::Null,
            }
        }
        "raw" => {
            let w = window.unwrap_or_else(|| sensor.vsd().window());
            let elements = sensor.store().query_raw(w, now);
            Json_::Array(
                elements
                    .iter()
                    .map(|e| element_to_json(schema, e).expect("stored elements match the schema"))
                    .collect(),
            )
        }
        "processed" => {
            let w = window.unwrap_or_else(|| sensor.vsd().window());
            sensor
                .store()
                .evaluate_window(w, sensor.vsd().aggregations(), now)
                .to_json()
        }
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "BadMode",
                format!("mode {other:?} is not latest, raw or processed"),
            ))
        }
    };
    Ok(Json(body).into_response())
}

async fn create_subscription(State(node): State<Arc<Node>>, body: Bytes) -> ApiResult<Response> {
    let req: SubscriptionRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", e.to_string()))?;
    let sub = node.subscriptions().create(req)?;
    Ok((StatusCode::CREATED, Json(sub)).into_response())
}

async fn list_subscriptions(State(node): State<Arc<Node>>) -> Response {
    Json(node.subscriptions().list()).into_response()
}

async fn get_subscription(State(node): State<Arc<Node>>, Path(id): Path<String>) -> ApiResult<Response> {
    node.subscriptions()
        .get(&id)
        .map(|s| Json(s).into_response())
        .ok_or_else(|| SubscriptionError::UnknownSubscription(id).into())
}

async fn delete_subscription(State(node): State<Arc<Node>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    node.subscriptions().delete(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn metrics(State(node): State<Arc<Node>>) -> Response {
    Json(node.metrics()).into_response()
}
