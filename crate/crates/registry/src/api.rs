//! HTTP surface of the registry.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mosden_core::NodeRegistration;
use mosden_runtime::ErrorBody;
use serde_json::json;

use crate::service::{DispatchError, IngestError, IngestOutcome, Registry, UserRequest};

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self(status, ErrorBody::new(code, detail))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/registry/sensors", get(list_sensors).post(register))
        .route(
            "/registry/requests",
            get(list_requests).post(create_request),
        )
        .route("/registry/requests/{id}", get(get_request))
        .route("/registry/requests/{id}/results", get(results))
        .route("/registry/ingest", post(ingest))
        .route("/registry/stats", get(stats))
        .with_state(registry)
}

async fn register(State(r): State<Arc<Registry>>, body: Bytes) -> ApiResult<Response> {
    let reg: NodeRegistration = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidDescriptor", e.to_string()))?;
    let n = r
        .register(&reg)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidDescriptor", e.to_string()))?;
    Ok(Json(json!({"node_id": reg.node_id, "registered": n})).into_response())
}

/// `?live=true` restricts the listing to records inside the liveness
/// horizon.
async fn list_sensors(
    State(r): State<Arc<Registry>>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let records = if q.get("live").is_some_and(|v| v == "true") {
        r.matching(&Default::default())
    } else {
        r.records()
    };
    Json(records).into_response()
}

async fn create_request(State(r): State<Arc<Registry>>, body: Bytes) -> ApiResult<Response> {
    let req: UserRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidRequest", e.to_string()))?;
    match r.dispatch(req).await {
        Ok(rec) if rec.subscriptions.is_empty() => Err(ApiError::new(
            StatusCode::BAD_GATEWAY,
            "DispatchFailed",
            serde_json::to_string(&rec.failures).expect("failures serialize"),
        )),
        Ok(rec) => Ok((StatusCode::CREATED, Json(rec)).into_response()),
        Err(e @ DispatchError::InvalidRequest(_)) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "InvalidRequest",
            e.to_string(),
        )),
        Err(e @ DispatchError::NoMatch(_)) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "NoMatch",
            e.to_string(),
        )),
    }
}

async fn list_requests(State(r): State<Arc<Registry>>) -> Response {
    Json(r.requests()).into_response()
}

fn unknown_request(id: &str) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "UnknownRequest",
        format!("no request {id:?}"),
    )
}

async fn get_request(
    State(r): State<Arc<Registry>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    r.request(&id)
        .map(|rec| Json(rec).into_response())
        .ok_or_else(|| unknown_request(&id))
}

async fn results(State(r): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Response> {
    match r.results(&id) {
        None => Err(unknown_request(&id)),
        Some(Ok(rows)) => Ok(Json(rows).into_response()),
        Some(Err(e)) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "StorageError",
            e.to_string(),
        )),
    }
}

async fn ingest(
    State(r): State<Arc<Registry>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<Response> {
    match r.ingest(q.get("node").map(String::as_str), &body) {
        Ok(outcome) => {
            let status = match outcome {
                IngestOutcome::Quarantined => StatusCode::ACCEPTED,
                _ => StatusCode::OK,
            };
            Ok((status, Json(json!({"status": outcome}))).into_response())
        }
        Err(e @ IngestError::Malformed(_)) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "MalformedDelivery",
            e.to_string(),
        )),
        Err(e @ IngestError::Io(_)) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "StorageError",
            e.to_string(),
        )),
    }
}

async fn stats(State(r): State<Arc<Registry>>) -> Response {
    Json(r.stats()).into_response()
}
