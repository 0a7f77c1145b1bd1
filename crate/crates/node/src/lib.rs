//! A mosden edge node: plugin host, generic wrapper (sampling engine),
//! push subscriptions, peer streaming and the HTTP API.

pub mod api;
pub mod config;
pub mod engine;
pub mod node;
pub mod peer;
pub mod plugin_host;
pub mod subscriptions;

pub use config::{ConfigError, NodeConfig};
pub use engine::{Engine, EngineError, SampleOutcome, SamplingTask, VirtualSensor};
pub use node::{run_node, start_node, Node, NodeError, NodeOptions, PeerSpec};
pub use subscriptions::{SubscriptionError, SubscriptionManager};
