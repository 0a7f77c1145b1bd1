use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use mosden_core::CostParameters;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: PathBuf,
    pub message: String,
}

/// Node configuration file (JSON). Relative paths are resolved against the
/// directory holding the file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub listen: SocketAddr,
    pub plugin_dir: PathBuf,
    pub data_dir: PathBuf,
    pub vsd_dir: PathBuf,
    #[serde(default)]
    pub cost_model: CostParameters,
    #[serde(default)]
    pub registry_url: Option<String>,
    /// Base URL other services use to reach this node. Defaults to
    /// `http://<listen>`.
    #[serde(default)]
    pub public_url: Option<String>,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_ms: u64,
    /// Disk budget for idle plugins; no eviction when absent.
    #[serde(default)]
    pub plugin_budget_bytes: Option<u64>,
    #[serde(default)]
    pub journal: Option<bool>,
}

fn default_heartbeat_ms() -> u64 {
    10_000
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |message: String| ConfigError {
            path: path.to_path_buf(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let mut cfg: NodeConfig = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.plugin_dir, &mut cfg.data_dir, &mut cfg.vsd_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.node_id.is_empty() {
            return Err("node_id must not be empty".into());
        }
        self.cost_model
            .validate()
            .map_err(|e| format!("cost_model: {e}"))?;
        if !self.plugin_dir.is_dir() {
            return Err(format!("plugin_dir {} is not a directory", self.plugin_dir.display()));
        }
        if !self.vsd_dir.is_dir() {
            return Err(format!("vsd_dir {} is not a directory", self.vsd_dir.display()));
        }
        if self.heartbeat_ms == 0 {
            return Err("heartbeat_ms must be positive".into());
        }
        Ok(())
    }

    pub fn base_url(&self) -> String {
        self.public_url
            .clone()
            .unwrap_or_else(|| format!("http://{}", self.listen))
            .trim_end_matches('/')
            .to_string()
    }

    pub fn journal_enabled(&self) -> bool {
        self.journal.unwrap_or(true)
    }
}
