//! Shared domain types.
//!
//! Types that carry invariants keep their fields private and are only
//! constructible through validating constructors (or serde, which routes
//! through the same constructors), so an invalid instance cannot exist.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since the Unix epoch.
pub type TimestampMs = i64;

/// Default plugin sampling interval when a definition omits it.
pub const DEFAULT_SAMPLING_INTERVAL_MS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid identifier {0:?}: must match [a-z][a-z0-9_]*")]
    BadIdentifier(String),
    #[error("duplicate field name {0:?} in schema")]
    DuplicateField(String),
    #[error("window size must be at least 1")]
    EmptyWindow,
    #[error("aggregation {func} requires a numeric field, {field:?} is {value_type}")]
    NonNumericAggregation {
        field: String,
        func: AggFn,
        value_type: ValueType,
    },
    #[error("transport {transport} {detail}")]
    BindingTransport {
        transport: Transport,
        detail: &'static str,
    },
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("emit_interval_ms ({emit}) must be >= sampling_interval_ms ({sampling})")]
    EmitFasterThanSampling { emit: u64, sampling: u64 },
    #[error("aggregation list must not be empty")]
    NoAggregations,
    #[error("aggregation {0} listed more than once")]
    DuplicateAggregation(String),
    #[error("push subscriptions require a delivery endpoint")]
    MissingEndpoint,
    #[error("expiry {expiry} is not after creation time {created_at}")]
    ExpiryNotInFuture {
        expiry: TimestampMs,
        created_at: TimestampMs,
    },
}

/// Returns true when `s` matches `[a-z][a-z0-9_]*`.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn check_identifier(s: &str) -> Result<(), ModelError> {
    if is_identifier(s) {
        Ok(())
    } else {
        Err(ModelError::BadIdentifier(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Double,
    Integer,
    String,
}

impl ValueType {
    pub fn is_numeric(self) -> bool {
        matches!(self, ValueType::Double | ValueType::Integer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::Double => "double",
            ValueType::Integer => "integer",
            ValueType::String => "string",
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One typed scalar of a reading row.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Double(f64),
    Integer(i64),
    Str(String),
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Double(_) => ValueType::Double,
            Value::Integer(_) => ValueType::Integer,
            Value::Str(_) => ValueType::String,
        }
    }

    /// Numeric view, widening integers to double.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Double(v) => Some(v),
            Value::Integer(v) => Some(v as f64),
            Value::Str(_) => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Double(v) => serde_json::Number::from_f64(*v)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Integer(v) => serde_json::Value::from(*v),
            Value::Str(s) => serde_json::Value::String(s.clone()),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Double(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

/// Schema cell describing one column of a stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DataFieldRepr")]
pub struct DataField {
    name: String,
    value_type: ValueType,
    #[serde(skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataFieldRepr {
    name: String,
    value_type: ValueType,
    #[serde(default)]
    unit: Option<String>,
}

impl TryFrom<DataFieldRepr> for DataField {
    type Error = ModelError;

    fn try_from(r: DataFieldRepr) -> Result<Self, Self::Error> {
        DataField::new(r.name, r.value_type, r.unit)
    }
}

impl DataField {
    pub fn new(
        name: impl Into<String>,
        value_type: ValueType,
        unit: Option<String>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        check_identifier(&name)?;
        Ok(Self {
            name,
            value_type,
            unit,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value_type(&self) -> ValueType {
        self.value_type
    }

    pub fn unit(&self) -> Option<&str> {
        self.unit.as_deref()
    }
}

/// Ordered list of fields with unique names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<DataField>", into = "Vec<DataField>")]
pub struct Schema(Vec<DataField>);

impl TryFrom<Vec<DataField>> for Schema {
    type Error = ModelError;

    fn try_from(fields: Vec<DataField>) -> Result<Self, Self::Error> {
        Schema::new(fields)
    }
}

impl From<Schema> for Vec<DataField> {
    fn from(s: Schema) -> Self {
        s.0
    }
}

impl Schema {
    pub fn new(fields: Vec<DataField>) -> Result<Self, ModelError> {
        let mut seen = HashSet::new();
        for f in &fields {
            if !seen.insert(f.name.as_str()) {
                return Err(ModelError::DuplicateField(f.name.clone()));
            }
        }
        Ok(Self(fields))
    }

    pub fn fields(&self) -> &[DataField] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&DataField> {
        self.0.iter().find(|f| f.name == name)
    }
}

/// One timestamped reading row. Values are positional against the owning
/// schema; conformance is checked by `validate_element_against_schema`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamElement {
    pub timestamp: TimestampMs,
    pub values: Vec<Value>,
}

impl StreamElement {
    pub fn new(timestamp: TimestampMs, values: Vec<Value>) -> Self {
        Self { timestamp, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    Subprocess,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::InProcess => "in_process",
            Transport::Subprocess => "subprocess",
        })
    }
}

/// Which plugin feeds a virtual sensor, how to reach it, and the
/// configuration handed to it before the first schema call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginBinding {
    plugin_id: String,
    transport: Transport,
    command: Option<Vec<String>>,
    config: BTreeMap<String, String>,
}

impl PluginBinding {
    pub fn new(
        plugin_id: impl Into<String>,
        transport: Transport,
        command: Option<Vec<String>>,
        config: BTreeMap<String, String>,
    ) -> Result<Self, ModelError> {
        let has_command = command.as_ref().is_some_and(|c| !c.is_empty());
        match (transport, has_command) {
            (Transport::Subprocess, false) => {
                return Err(ModelError::BindingTransport {
                    transport,
                    detail: "requires a non-empty command",
                })
            }
            (Transport::InProcess, true) => {
                return Err(ModelError::BindingTransport {
                    transport,
                    detail: "must not carry a command",
                })
            }
            _ => {}
        }
        Ok(Self {
            plugin_id: plugin_id.into(),
            transport,
            command: command.filter(|c| !c.is_empty()),
            config,
        })
    }

    pub fn in_process(plugin_id: impl Into<String>, config: BTreeMap<String, String>) -> Self {
        Self {
            plugin_id: plugin_id.into(),
            transport: Transport::InProcess,
            command: None,
            config,
        }
    }

    pub fn plugin_id(&self) -> &str {
        &self.plugin_id
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn command(&self) -> Option<&[String]> {
        self.command.as_deref()
    }

    pub fn config(&self) -> &BTreeMap<String, String> {
        &self.config
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Count,
    Time,
}

/// Selection rule for a window: the last `size` rows, or rows with
/// timestamp in `(now - size, now]` milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "WindowSpecRepr")]
pub struct WindowSpec {
    kind: WindowKind,
    size: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowSpecRepr {
    kind: WindowKind,
    size: u64,
}

impl TryFrom<WindowSpecRepr> for WindowSpec {
    type Error = ModelError;

    fn try_from(r: WindowSpecRepr) -> Result<Self, Self::Error> {
        WindowSpec::new(r.kind, r.size)
    }
}

impl WindowSpec {
    pub fn new(kind: WindowKind, size: u64) -> Result<Self, ModelError> {
        if size == 0 {
            return Err(ModelError::EmptyWindow);
        }
        Ok(Self { kind, size })
    }

    pub fn count(size: u64) -> Result<Self, ModelError> {
        Self::new(WindowKind::Count, size)
    }

    pub fn time(size_ms: u64) -> Result<Self, ModelError> {
        Self::new(WindowKind::Time, size_ms)
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn size(&self) -> u64 {
        self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Avg,
    Min,
    Max,
    Sum,
    Count,
    Last,
}

impl AggFn {
    pub const ALL: [AggFn; 6] = [
        AggFn::Avg,
        AggFn::Min,
        AggFn::Max,
        AggFn::Sum,
        AggFn::Count,
        AggFn::Last,
    ];

    pub fn requires_numeric(self) -> bool {
        matches!(self, AggFn::Avg | AggFn::Min | AggFn::Max | AggFn::Sum)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggFn::Avg => "avg",
            AggFn::Min => "min",
            AggFn::Max => "max",
            AggFn::Sum => "sum",
            AggFn::Count => "count",
            AggFn::Last => "last",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl fmt::Display for AggFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "AggregationRepr")]
pub struct Aggregation {
    field: String,
    #[serde(rename = "fn")]
    func: AggFn,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AggregationRepr {
    field: String,
    #[serde(rename = "fn")]
    func: AggFn,
}

impl TryFrom<AggregationRepr> for Aggregation {
    type Error = ModelError;

    fn try_from(r: AggregationRepr) -> Result<Self, Self::Error> {
        Aggregation::new(r.field, r.func)
    }
}

impl Aggregation {
    pub fn new(field: impl Into<String>, func: AggFn) -> Result<Self, ModelError> {
        let field = field.into();
        check_identifier(&field)?;
        Ok(Self { field, func })
    }

    pub fn field(&self) -> &str {
        &self.field
    }

    pub fn func(&self) -> AggFn {
        self.func
    }

    /// Result key, `field.fn`.
    pub fn key(&self) -> String {
        format!("{}.{}", self.field, self.func)
    }

    /// Checks the aggregation against a concrete schema.
    pub fn check_against(&self, schema: &Schema) -> Result<(), AggregationSchemaError> {
        let field = schema
            .field(&self.field)
            .ok_or_else(|| AggregationSchemaError::FieldNotInSchema(self.field.clone()))?;
        if self.func.requires_numeric() && !field.value_type().is_numeric() {
            return Err(AggregationSchemaError::Model(
                ModelError::NonNumericAggregation {
                    field: self.field.clone(),
                    func: self.func,
                    value_type: field.value_type(),
                },
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregationSchemaError {
    #[error("field {0:?} not in plugin schema")]
    FieldNotInSchema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Declarative binding of plugin, configuration, sampling, window query
/// and history for one virtual sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualSensorDefinition {
    pub(crate) name: String,
    pub(crate) binding: PluginBinding,
    pub(crate) sampling_interval_ms: u64,
    pub(crate) window: WindowSpec,
    pub(crate) aggregations: Vec<Aggregation>,
    pub(crate) emit_interval_ms: u64,
    pub(crate) history_size: u64,
    pub(crate) description: Option<String>,
}

impl VirtualSensorDefinition {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        binding: PluginBinding,
        sampling_interval_ms: u64,
        window: WindowSpec,
        aggregations: Vec<Aggregation>,
        emit_interval_ms: u64,
        history_size: u64,
        description: Option<String>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        check_identifier(&name)?;
        if sampling_interval_ms == 0 {
            return Err(ModelError::NotPositive("sampling_interval_ms"));
        }
        if emit_interval_ms == 0 {
            return Err(ModelError::NotPositive("emit_interval_ms"));
        }
        if history_size == 0 {
            return Err(ModelError::NotPositive("history_size"));
        }
        if aggregations.is_empty() {
            return Err(ModelError::NoAggregations);
        }
        let mut keys = HashSet::new();
        if let Some(dup) = aggregations.iter().find(|a| !keys.insert(a.key())) {
            return Err(ModelError::DuplicateAggregation(dup.key()));
        }
        if emit_interval_ms < sampling_interval_ms {
            return Err(ModelError::EmitFasterThanSampling {
                emit: emit_interval_ms,
                sampling: sampling_interval_ms,
            });
        }
        Ok(Self {
            name,
            binding,
            sampling_interval_ms,
            window,
            aggregations,
            emit_interval_ms,
            history_size,
            description,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn binding(&self) -> &PluginBinding {
        &self.binding
    }

    pub fn sampling_interval_ms(&self) -> u64 {
        self.sampling_interval_ms
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn aggregations(&self) -> &[Aggregation] {
        &self.aggregations
    }

    pub fn emit_interval_ms(&self) -> u64 {
        self.emit_interval_ms
    }

    pub fn history_size(&self) -> u64 {
        self.history_size
    }

    pub fn description(&self) -> Option<&str> {
        self.description.as_deref()
    }

    /// Activation-time check of every aggregation against the plugin schema.
    pub fn check_schema(&self, schema: &Schema) -> Result<(), AggregationSchemaError> {
        self.aggregations
            .iter()
            .try_for_each(|a| a.check_against(schema))
    }
}

/// Registry-facing description of one virtual sensor on one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDescriptor {
    pub node_id: String,
    pub vs_name: String,
    pub schema: Schema,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub registered_at: TimestampMs,
}

impl SensorDescriptor {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_identifier(&self.vs_name)?;
        if self.node_id.is_empty() {
            return Err(ModelError::BadIdentifier(self.node_id.clone()));
        }
        Ok(())
    }
}

/// Body a node posts to the registry on start and on every heartbeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub node_id: String,
    pub base_url: String,
    pub descriptors: Vec<SensorDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubscriptionMode {
    Push,
    Pull,
}

/// What a push subscription delivers on each tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    /// The virtual sensor's window evaluation at send time.
    #[default]
    Processed,
    /// Every raw element appended since the previous delivery.
    Raw,
}

/// Body of a subscription creation request (a subscription minus its id).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubscriptionRequest {
    pub vs_name: String,
    pub mode: SubscriptionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_endpoint: Option<String>,
    pub interval_ms: u64,
    pub expiry: TimestampMs,
    #[serde(default)]
    pub payload: PayloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregations: Option<Vec<Aggregation>>,
}

/// A registered push or pull request with an expiry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SubscriptionRepr")]
pub struct Subscription {
    id: String,
    created_at: TimestampMs,
    #[serde(flatten)]
    request: SubscriptionRequest,
}

#[derive(Deserialize)]
struct SubscriptionRepr {
    id: String,
    created_at: TimestampMs,
    #[serde(flatten)]
    request: SubscriptionRequest,
}

impl TryFrom<SubscriptionRepr> for Subscription {
    type Error = ModelError;

    fn try_from(r: SubscriptionRepr) -> Result<Self, Self::Error> {
        Subscription::new(r.id, r.request, r.created_at)
    }
}

impl Subscription {
    pub fn new(
        id: impl Into<String>,
        request: SubscriptionRequest,
        created_at: TimestampMs,
    ) -> Result<Self, ModelError> {
        check_identifier(&request.vs_name)?;
        if request.interval_ms == 0 {
            return Err(ModelError::NotPositive("interval_ms"));
        }
        if request.mode == SubscriptionMode::Push
            && request
                .delivery_endpoint
                .as_deref()
                .is_none_or(str::is_empty)
        {
            return Err(ModelError::MissingEndpoint);
        }
        if request.expiry <= created_at {
            return Err(ModelError::ExpiryNotInFuture {
                expiry: request.expiry,
                created_at,
            });
        }
        Ok(Self {
            id: id.into(),
            created_at,
            request,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn created_at(&self) -> TimestampMs {
        self.created_at
    }

    pub fn request(&self) -> &SubscriptionRequest {
        &self.request
    }

    pub fn vs_name(&self) -> &str {
        &self.request.vs_name
    }

    pub fn mode(&self) -> SubscriptionMode {
        self.request.mode
    }

    pub fn delivery_endpoint(&self) -> Option<&str> {
        self.request.delivery_endpoint.as_deref()
    }

    pub fn interval_ms(&self) -> u64 {
        self.request.interval_ms
    }

    pub fn expiry(&self) -> TimestampMs {
        self.request.expiry
    }

    pub fn payload(&self) -> PayloadKind {
        self.request.payload
    }
}
