//! Peer streaming: a built-in plugin whose readings are pulled from a
//! virtual sensor on another node.

use std::collections::BTreeMap;

use async_trait::async_trait;
use mosden_core::protocol::{PluginReply, PluginRequest};
use mosden_core::{Schema, SensorDescriptor, TimestampMs};
use mosden_runtime::{HttpError, SharedHttpClient};
use serde_json::Value as Json;
use thiserror::Error;

use crate::plugin_host::InProcessPlugin;

pub const PEER_PLUGIN_ID: &str = "peer";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeerError {
    #[error("remote node {url} unreachable: {detail}")]
    RemoteUnreachable { url: String, detail: String },
    #[error("remote node {url} has no virtual sensor {vs_name:?}")]
    RemoteUnknownVS { url: String, vs_name: String },
    #[error("remote node {url} answered unexpectedly: {detail}")]
    BadRemoteResponse { url: String, detail: String },
}

impl PeerError {
    pub fn code(&self) -> &'static str {
        match self {
            PeerError::RemoteUnreachable { .. } => "RemoteUnreachable",
            PeerError::RemoteUnknownVS { .. } => "RemoteUnknownVS",
            PeerError::BadRemoteResponse { .. } => "BadRemoteResponse",
        }
    }
}

/// Binding config for a peer virtual sensor.
pub fn peer_config(remote: &str, vs_name: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("remote".to_string(), remote.trim_end_matches('/').to_string()),
        ("vs_name".to_string(), vs_name.to_string()),
    ])
}

/// Fetches the remote sensor's schema, distinguishing an unreachable node
/// from a missing sensor.
pub async fn fetch_remote_schema(
    http: &SharedHttpClient,
    remote: &str,
    vs_name: &str,
) -> Result<Schema, PeerError> {
    let url = format!("{}/sensors", remote.trim_end_matches('/'));
    let resp = http.get(&url).await.map_err(|e| unreachable(&url, e))?;
    if !resp.is_success() {
        return Err(PeerError::BadRemoteResponse {
            url,
            detail: format!("status {}", resp.status),
        });
    }
    let descriptors: Vec<SensorDescriptor> =
        serde_json::from_slice(&resp.body).map_err(|e| PeerError::BadRemoteResponse {
            url: url.clone(),
            detail: e.to_string(),
        })?;
    descriptors
        .into_iter()
        .find(|d| d.vs_name == vs_name)
        .map(|d| d.schema)
        .ok_or(PeerError::RemoteUnknownVS {
            url,
            vs_name: vs_name.to_string(),
        })
}

fn unreachable(url: &str, e: HttpError) -> PeerError {
    PeerError::RemoteUnreachable {
        url: url.to_string(),
        detail: e.to_string(),
    }
}

/// Reads `mode=latest` from the remote on every tick. A remote element
/// already seen (same timestamp) is reported as no new data, so a faster
/// local sampling rate does not duplicate rows.
pub struct PeerPlugin {
    http: SharedHttpClient,
    remote: Option<(String, String)>,
    last_ts: Option<TimestampMs>,
}

impl PeerPlugin {
    pub fn new(http: SharedHttpClient) -> Self {
        Self {
            http,
            remote: None,
            last_ts: None,
        }
    }

    async fn readings(&mut self, remote: &str, vs: &str) -> Result<Json, String> {
        let url = format!("{remote}/sensors/{vs}/data?mode=latest");
        let resp = self.http.get(&url).await.map_err(|e| e.to_string())?;
        if !resp.is_success() {
            return Err(format!("{url}: status {}", resp.status));
        }
        let j: Json = serde_json::from_slice(&resp.body).map_err(|e| e.to_string())?;
        let ts = match &j {
            Json::Null => return Ok(Json::Null),
            other => other
                .get("timestamp")
                .and_then(Json::as_i64)
                .ok_or_else(|| format!("{url}: element without timestamp"))?,
        };
        if self.last_ts == Some(ts) {
            return Ok(Json::Null);
        }
        self.last_ts = Some(ts);
        Ok(j)
    }
}

#[async_trait]
impl InProcessPlugin for PeerPlugin {
    async fn handle(&mut self, req: &PluginRequest) -> PluginReply {
        match req {
            PluginRequest::SetConfiguration { config } => {
                for key in ["remote", "vs_name"] {
                    if !config.contains_key(key) {
                        return PluginReply::Err(format!("missing required config key: {key}"));
                    }
                }
                self.remote = Some((
                    config["remote"].trim_end_matches('/').to_string(),
                    config["vs_name"].clone(),
                ));
                self.last_ts = None;
                PluginReply::Ok(Json::Null)
            }
            PluginRequest::GetDataStructure => {
                let Some((remote, vs)) = self.remote.clone() else {
                    return PluginReply::Err("not configured".into());
                };
                match fetch_remote_schema(&self.http, &remote, &vs).await {
                    Ok(schema) => PluginReply::Ok(serde_json::to_value(schema).expect("schema serializes")),
                    Err(e) => PluginReply::Err(e.to_string()),
                }
            }
            PluginRequest::GetReadings => {
                let Some((remote, vs)) = self.remote.clone() else {
                    return PluginReply::Err("not configured".into());
                };
                match self.readings(&remote, &vs).await {
                    Ok(j) => PluginReply::Ok(j),
                    Err(e) => PluginReply::Err(e),
                }
            }
        }
    }
}
