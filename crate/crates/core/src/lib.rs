//! Core of the mosden edge node: the data model, canonical encodings,
//! the bounded stream store with windowed aggregation, the synthetic
//! energy model, and the reference simulated plugin.
//!
//! The energy model is generic over the float type; the aliases below pin
//! it to `f64`, which is what the node and its metrics use.

pub mod element;
pub mod metrics;
pub mod model;
pub mod offload;
pub mod protocol;
pub mod sim;
pub mod stream;
pub mod vsd;

pub use element::{
    parse_stream_element, serialize_stream_element, validate_element_against_schema, Violation,
};
pub use model::{
    AggFn, Aggregation, DataField, NodeRegistration, PayloadKind, PluginBinding, Schema,
    SensorDescriptor, StreamElement, Subscription, SubscriptionMode, SubscriptionRequest,
    TimestampMs, Transport, Value, ValueType, VirtualSensorDefinition, WindowKind, WindowSpec,
};
pub use offload::{decide, Strategy};
pub use stream::{StreamStore, WindowResult};
pub use vsd::{parse_vsd, serialize_vsd};

pub type CostParameters = offload::CostParameters<f64>;
pub type EnergyEstimate = offload::EnergyEstimate<f64>;
pub type TransmissionPlan = offload::TransmissionPlan<f64>;
