use std::collections::BTreeMap;
use std::sync::Arc;

use mosden_core::element::{element_from_plugin_json, validate_element_against_schema};
use mosden_core::protocol::{PluginReply, PluginRequest};
use mosden_core::{PluginBinding, Schema, StreamElement, TimestampMs};
use serde_json::Value as Json;

use super::transport::{PluginConnection, PluginLauncher};
use super::{HostConfig, HostError, PluginState};

pub(crate) const CONNECTION_LOST: &str = "connection lost";

/// Outcome of a successful `get_readings` call.
#[derive(Debug, Clone, PartialEq)]
pub enum Reading {
    Element(StreamElement),
    /// The plugin had nothing new this tick (`"result": null`).
    NoData,
}

/// Host-side view of one plugin instance bound to one virtual sensor.
pub struct PluginHandle {
    binding: PluginBinding,
    state: PluginState,
    config_delivered: bool,
    schema: Option<Schema>,
    last_used: TimestampMs,
    conn: Option<Box<dyn PluginConnection>>,
    launcher: Arc<dyn PluginLauncher>,
    config: HostConfig,
    restarts: u32,
}

impl std::fmt::Debug for PluginHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginHandle")
            .field("plugin_id", &self.binding.plugin_id())
            .field("state", &self.state)
            .field("schema", &self.schema)
            .field("restarts", &self.restarts)
            .finish()
    }
}

impl PluginHandle {
    /// Launches the plugin; the handle starts in `configured`.
    pub async fn connect(
        binding: PluginBinding,
        launcher: Arc<dyn PluginLauncher>,
        config: HostConfig,
    ) -> Result<Self, HostError> {
        let conn = launcher.launch().await?;
        Ok(Self {
            binding,
            state: PluginState::Configured,
            config_delivered: false,
            schema: None,
            last_used: 0,
            conn: Some(conn),
            launcher,
            config,
            restarts: 0,
        })
    }

    pub fn binding(&self) -> &PluginBinding {
        &self.binding
    }

    pub fn state(&self) -> PluginState {
        self.state
    }

    pub fn schema(&self) -> Option<&Schema> {
        self.schema.as_ref()
    }

    pub fn last_used(&self) -> TimestampMs {
        self.last_used
    }

    pub fn restarts(&self) -> u32 {
        self.restarts
    }

    fn transition(&mut self, to: PluginState) {
        debug_assert!(
            self.state.can_transition(to),
            "illegal transition {} -> {}",
            self.state,
            to
        );
        self.state = to;
    }

    pub fn mark_failed(&mut self) {
        self.transition(PluginState::Failed);
        self.conn = None;
    }

    async fn call(&mut self, req: PluginRequest) -> Result<PluginReply, HostError> {
        let op = req.op();
        let conn = self.conn.as_mut().ok_or_else(|| {
            HostError::PluginProtocolError(format!("{CONNECTION_LOST}: no live plugin process"))
        })?;
        match tokio::time::timeout(self.config.call_timeout, conn.call(&req)).await {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => {
                if e.is_fatal_to_connection() {
                    self.mark_failed();
                }
                Err(e)
            }
            Err(_) => {
                self.mark_failed();
                Err(HostError::PluginTimeout {
                    op,
                    timeout_ms: self.config.call_timeout.as_millis() as u64,
                })
            }
        }
    }

    /// Delivers `config` to the plugin. Legal before the plugin starts.
    pub async fn set_configuration(
        &mut self,
        config: &BTreeMap<String, String>,
    ) -> Result<(), HostError> {
        if !matches!(self.state, PluginState::Configured | PluginState::Initialized) {
            return Err(HostError::IllegalState {
                op: "set_configuration",
                state: self.state,
            });
        }
        match self
            .call(PluginRequest::SetConfiguration {
                config: config.clone(),
            })
            .await?
        {
            PluginReply::Ok(_) => {
                self.config_delivered = true;
                Ok(())
            }
            PluginReply::Err(msg) => Err(HostError::PluginRejectedConfig(msg)),
        }
    }

    /// Fetches (once) and caches the plugin schema; moves to `initialized`.
    pub async fn get_data_structure(&mut self) -> Result<Schema, HostError> {
        if self.state != PluginState::Configured || !self.config_delivered {
            return Err(HostError::IllegalState {
                op: "get_data_structure",
                state: self.state,
            });
        }
        let result = match self.call(PluginRequest::GetDataStructure).await? {
            PluginReply::Ok(r) => r,
            PluginReply::Err(msg) => return Err(HostError::PluginProtocolError(msg)),
        };
        let schema: Schema = serde_json::from_value(result)
            .map_err(|e| HostError::PluginProtocolError(format!("bad schema: {e}")))?;
        if let Some(cached) = &self.schema {
            if *cached != schema {
                self.mark_failed();
                return Err(HostError::PluginProtocolError(
                    "plugin schema changed across restart".into(),
                ));
            }
        }
        self.schema = Some(schema.clone());
        self.transition(PluginState::Initialized);
        Ok(schema)
    }

    pub fn start(&mut self) -> Result<(), HostError> {
        if self.state != PluginState::Initialized {
            return Err(HostError::IllegalState {
                op: "start",
                state: self.state,
            });
        }
        self.transition(PluginState::Running);
        Ok(())
    }

    /// One reading, validated against the cached schema. Only legal while
    /// running.
    pub async fn get_readings(&mut self, now: TimestampMs) -> Result<Reading, HostError> {
        if self.state != PluginState::Running {
            return Err(HostError::IllegalState {
                op: "get_readings",
                state: self.state,
            });
        }
        self.last_used = now;
        let result = match self.call(PluginRequest::GetReadings).await? {
            PluginReply::Ok(Json::Null) => return Ok(Reading::NoData),
            PluginReply::Ok(r) => r,
            PluginReply::Err(msg) => return Err(HostError::PluginProtocolError(msg)),
        };
        let schema = self.schema.as_ref().expect("running implies schema");
        let element = element_from_plugin_json(schema, &result)
            .map_err(|e| HostError::PluginProtocolError(e.to_string()))?;
        let violations = validate_element_against_schema(schema, &element);
        if violations.is_empty() {
            Ok(Reading::Element(element))
        } else {
            Err(HostError::SchemaViolation(violations))
        }
    }

    pub fn stop(&mut self) {
        if self.state == PluginState::Running {
            self.transition(PluginState::Stopped);
        }
        self.conn = None;
    }

    /// Relaunches a failed plugin and replays configuration and schema
    /// negotiation, returning it to `running`.
    pub async fn restart(&mut self) -> Result<(), HostError> {
        if self.state != PluginState::Failed {
            return Err(HostError::IllegalState {
                op: "restart",
                state: self.state,
            });
        }
        self.restarts += 1;
        self.conn = Some(self.launcher.launch().await?);
        self.transition(PluginState::Configured);
        self.config_delivered = false;
        let cfg = self.binding.config().clone();
        let res = async {
            self.set_configuration(&cfg).await?;
            self.get_data_structure().await?;
            self.start()
        }
        .await;
        if res.is_err() && self.state != PluginState::Failed {
            self.mark_failed();
        }
        res
    }

    #[cfg(test)]
    pub(crate) fn force_state(&mut self, state: PluginState) {
        self.state = state;
    }
}
