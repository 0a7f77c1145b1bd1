//! Plugin wire protocol and manifest format.
//!
//! A plugin process writes one handshake line on start, then answers one
//! request line with one reply line. Every line is a single UTF-8 JSON
//! object terminated by `\n`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub const PROTOCOL: &str = "mosden-plugin/1";
/// Action string every manifest must declare.
pub const PICK_PLUGIN_ACTION: &str = "mosden.plugin.pick_plugin/1";
pub const MANIFEST_FILE: &str = "plugin.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub plugin_id: String,
    pub version: String,
}

impl Handshake {
    pub fn new(plugin_id: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            protocol: PROTOCOL.to_string(),
            plugin_id: plugin_id.into(),
            version: version.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum PluginRequest {
    SetConfiguration { config: BTreeMap<String, String> },
    GetDataStructure,
    GetReadings,
}

impl PluginRequest {
    pub fn op(&self) -> &'static str {
        match self {
            PluginRequest::SetConfiguration { .. } => "set_configuration",
            PluginRequest::GetDataStructure => "get_data_structure",
            PluginRequest::GetReadings => "get_readings",
        }
    }
}

/// `{"ok":true,"result":...}` or `{"ok":false,"error":"..."}`.
#[derive(Debug, Clone, PartialEq)]
pub enum PluginReply {
    Ok(Json),
    Err(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed plugin reply: {0}")]
pub struct ReplyError(pub String);

impl PluginReply {
    pub fn to_json(&self) -> Json {
        match self {
            PluginReply::Ok(result) => json!({"ok": true, "result": result}),
            PluginReply::Err(error) => json!({"ok": false, "error": error}),
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(&self.to_json()).expect("JSON values always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(j: &Json) -> Result<Self, ReplyError> {
        let obj = j
            .as_object()
            .ok_or_else(|| ReplyError("expected an object".into()))?;
        match obj.get("ok").and_then(Json::as_bool) {
            Some(true) => Ok(PluginReply::Ok(
                obj.get("result").cloned().unwrap_or(Json::Null),
            )),
            Some(false) => Ok(PluginReply::Err(
                obj.get("error")
                    .and_then(Json::as_str)
                    .unwrap_or("unspecified plugin error")
                    .to_string(),
            )),
            None => Err(ReplyError("missing boolean \"ok\"".into())),
        }
    }

    pub fn parse_line(line: &str) -> Result<Self, ReplyError> {
        let j: Json = serde_json::from_str(line).map_err(|e| ReplyError(e.to_string()))?;
        Self::from_json(&j)
    }
}

/// Contents of a plugin directory's `plugin.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginManifest {
    pub plugin_id: String,
    pub version: String,
    pub action: String,
    pub size_bytes: u64,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("manifest is not valid: {0}")]
    Malformed(String),
    #[error("manifest action {0:?} does not equal {PICK_PLUGIN_ACTION:?}")]
    ActionMismatch(String),
    #[error("manifest plugin_id is empty")]
    EmptyId,
}

impl PluginManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self, ManifestError> {
        let m: PluginManifest =
            serde_json::from_slice(bytes).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        if m.action != PICK_PLUGIN_ACTION {
            return Err(ManifestError::ActionMismatch(m.action));
        }
        if m.plugin_id.is_empty() {
            return Err(ManifestError::EmptyId);
        }
        Ok(m)
    }
}
