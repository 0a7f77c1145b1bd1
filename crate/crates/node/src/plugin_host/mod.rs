//! Plugin discovery, launching and the three-call plugin contract.

mod handle;
mod registry;
mod transport;

use std::fmt;
use std::time::Duration;

use mosden_core::element::Violation;
use thiserror::Error;

pub use handle::{PluginHandle, Reading};
pub use registry::{
    discover_plugins, select_evictions, Discovery, DiscoveryWarning, EvictionCandidate,
    InProcessFactory, InstalledPlugin, PluginRegistry,
};
pub use transport::{
    InProcessLauncher, InProcessPlugin, PluginConnection, PluginLauncher, SimInProcess,
    SubprocessLauncher,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PluginState {
    Configured,
    Initialized,
    Running,
    Stopped,
    Failed,
}

impl PluginState {
    pub const ALL: [PluginState; 5] = [
        PluginState::Configured,
        PluginState::Initialized,
        PluginState::Running,
        PluginState::Stopped,
        PluginState::Failed,
    ];

    /// Legal moves: configured → initialized → running → stopped, anything
    /// → failed, and failed → configured when the host restarts a plugin.
    pub fn can_transition(self, to: PluginState) -> bool {
        use PluginState::*;
        matches!(
            (self, to),
            (Configured, Initialized)
                | (Initialized, Running)
                | (Running, Stopped)
                | (_, Failed)
                | (Failed, Configured)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PluginState::Configured => "configured",
            PluginState::Initialized => "initialized",
            PluginState::Running => "running",
            PluginState::Stopped => "stopped",
            PluginState::Failed => "failed",
        }
    }
}

impl fmt::Display for PluginState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("plugin protocol error: {0}")]
    PluginProtocolError(String),
    #[error("plugin rejected configuration: {0}")]
    PluginRejectedConfig(String),
    #[error("plugin did not answer {op} within {timeout_ms} ms")]
    PluginTimeout { op: &'static str, timeout_ms: u64 },
    #[error("reading violates schema: {0:?}")]
    SchemaViolation(Vec<Violation>),
    #[error("{op} is not legal in plugin state {state}")]
    IllegalState { op: &'static str, state: PluginState },
    #[error("cannot launch plugin: {0}")]
    Launch(String),
}

impl HostError {
    /// Failures that leave the plugin unusable and trigger the restart policy.
    pub fn is_fatal_to_connection(&self) -> bool {
        matches!(
            self,
            HostError::PluginTimeout { .. } | HostError::Launch(_)
        ) || matches!(self, HostError::PluginProtocolError(m) if m.starts_with(handle::CONNECTION_LOST))
    }
}

/// Fault-handling limits applied to every plugin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostConfig {
    pub call_timeout: Duration,
    pub restart_backoff: Duration,
    pub max_restarts: u32,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            call_timeout: Duration::from_millis(5000),
            restart_backoff: Duration::from_millis(1000),
            max_restarts: 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_table() {
        use PluginState::*;
        let legal: Vec<_> = PluginState::ALL
            .iter()
            .flat_map(|a| PluginState::ALL.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_transition(*b))
            .collect();
        assert_eq!(
            legal,
            vec![
                (Configured, Initialized),
                (Configured, Failed),
                (Initialized, Running),
                (Initialized, Failed),
                (Running, Stopped),
                (Running, Failed),
                (Stopped, Failed),
                (Failed, Configured),
                (Failed, Failed),
            ]
        );
    }
}
