use std::path::{Path, PathBuf};

use mosden_core::{AggFn, Aggregation, CostParameters, PayloadKind, WindowSpec};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Invalid { path: PathBuf, detail: String },
}

/// Which load dimension the points sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Sensors,
    Queries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Real time, real loopback TCP.
    #[default]
    System,
    /// Virtual time on a paused single-threaded runtime, in-process HTTP.
    Mock,
}

fn one() -> u32 {
    1
}

fn default_seed() -> u64 {
    1
}

fn default_poll_ms() -> u64 {
    1000
}

fn default_window() -> WindowSpec {
    WindowSpec::count(10).expect("positive window")
}

fn default_aggregations() -> Vec<Aggregation> {
    vec![Aggregation::new("temp", AggFn::Avg).expect("valid aggregation")]
}

/// Bench scenario file (JSON).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub axis: Axis,
    pub points: Vec<u32>,
    pub duration_s: u64,
    pub sampling_ms: u64,
    #[serde(default)]
    pub cost_model: CostParameters,
    #[serde(default)]
    pub clock: ClockMode,
    /// Sensor count when sweeping queries.
    #[serde(default = "one")]
    pub sensors: u32,
    /// Query count when sweeping sensors.
    #[serde(default = "one")]
    pub queries: u32,
    /// Subscription interval; defaults to `sampling_ms`.
    #[serde(default)]
    pub interval_ms: Option<u64>,
    /// Defaults to `sampling_ms`.
    #[serde(default)]
    pub emit_interval_ms: Option<u64>,
    #[serde(default = "default_window")]
    pub window: WindowSpec,
    #[serde(default = "default_aggregations")]
    pub aggregations: Vec<Aggregation>,
    #[serde(default)]
    pub payload: PayloadKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Period of the /healthz and pull probes.
    #[serde(default = "default_poll_ms")]
    pub poll_ms: u64,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let bytes = std::fs::read(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let invalid = |detail: String| ScenarioError::Invalid {
            path: path.to_path_buf(),
            detail,
        };
        let s: Scenario = serde_json::from_slice(&bytes).map_err(|e| invalid(e.to_string()))?;
        s.validate().map_err(invalid)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.points.is_empty() {
            return Err("points must not be empty".into());
        }
        if self.axis == Axis::Sensors && self.points.contains(&0) {
            return Err("a sensors point must be at least 1".into());
        }
        if self.sensors == 0 {
            return Err("sensors must be at least 1".into());
        }
        for (name, v) in [
            ("duration_s", self.duration_s),
            ("sampling_ms", self.sampling_ms),
            ("interval_ms", self.interval_ms()),
            ("emit_interval_ms", self.emit_interval_ms()),
            ("poll_ms", self.poll_ms),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.aggregations.is_empty() {
            return Err("aggregations must not be empty".into());
        }
        self.cost_model.validate().map_err(|e| e.to_string())
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms.unwrap_or(self.sampling_ms)
    }

    pub fn emit_interval_ms(&self) -> u64 {
        self.emit_interval_ms.unwrap_or(self.sampling_ms)
    }

    /// `(sensors, queries)` at one point.
    pub fn load_at(&self, point: u32) -> (u32, u32) {
        match self.axis {
            Axis::Sensors => (point, self.queries),
            Axis::Queries => (self.sensors, point),
        }
    }
}
