//! Virtual sensor definition documents (JSON).
//!
//! Parsing is strict: unknown keys are rejected and every error carries a
//! JSON pointer to the offending key.

use std::collections::BTreeMap;

use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::model::{
    AggFn, Aggregation, ModelError, PluginBinding, Transport, VirtualSensorDefinition, WindowKind,
    WindowSpec, DEFAULT_SAMPLING_INTERVAL_MS,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VsdError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invariant violated at {path}: {message}")]
    Invariant { path: String, message: String },
}

impl VsdError {
    pub fn path(&self) -> &str {
        match self {
            VsdError::Schema { path, .. } | VsdError::Invariant { path, .. } => path,
        }
    }

    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        VsdError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    fn invariant(path: impl Into<String>, err: impl ToString) -> Self {
        VsdError::Invariant {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "name",
    "binding",
    "sampling_interval_ms",
    "window",
    "aggregations",
    "emit_interval_ms",
    "history_size",
    "description",
];
const BINDING_KEYS: &[&str] = &["plugin_id", "transport", "command", "config"];
const WINDOW_KEYS: &[&str] = &["kind", "size"];
const AGG_KEYS: &[&str] = &["field", "fn"];

struct Obj<'a> {
    map: &'a Map<String, Json>,
    path: String,
}

impl<'a> Obj<'a> {
    fn new(v: &'a Json, path: &str, allowed: &[&str]) -> Result<Self, VsdError> {
        let map = v
            .as_object()
            .ok_or_else(|| VsdError::schema(path_or_root(path), "expected an object"))?;
        if let Some(extra) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(VsdError::schema(
                format!("{path}/{extra}"),
                "unexpected key",
            ));
        }
        Ok(Self {
            map,
            path: path.to_string(),
        })
    }

    fn ptr(&self, key: &str) -> String {
        format!("{}/{}", self.path, key)
    }

    fn opt(&self, key: &str) -> Option<&'a Json> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn req(&self, key: &str) -> Result<&'a Json, VsdError> {
        self.opt(key)
            .ok_or_else(|| VsdError::schema(self.ptr(key), "missing required key"))
    }

    fn str(&self, key: &str) -> Result<&'a str, VsdError> {
        self.req(key)?
            .as_str()
            .ok_or_else(|| VsdError::schema(self.ptr(key), "expected a string"))
    }

    fn opt_str(&self, key: &str) -> Result<Option<&'a str>, VsdError> {
        self.opt(key)
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| VsdError::schema(self.ptr(key), "expected a string"))
            })
            .transpose()
    }

    fn uint(&self, key: &str) -> Result<u64, VsdError> {
        as_uint(self.req(key)?, &self.ptr(key))
    }

    fn opt_uint(&self, key: &str) -> Result<Option<u64>, VsdError> {
        self.opt(key)
            .map(|v| as_uint(v, &self.ptr(key)))
            .transpose()
    }
}

fn path_or_root(path: &str) -> String {
    if path.is_empty() {
        "/".to_string()
    } else {
        path.to_string()
    }
}

fn as_uint(v: &Json, path: &str) -> Result<u64, VsdError> {
    v.as_u64()
        .ok_or_else(|| VsdError::schema(path, "expected a non-negative integer"))
}

/// Parses and validates a virtual sensor definition document, applying
/// defaults for omitted optional keys.
pub fn parse_vsd(document: &[u8]) -> Result<VirtualSensorDefinition, VsdError> {
    let root: Json = serde_json::from_slice(document)
        .map_err(|e| VsdError::schema("/", format!("invalid JSON: {e}")))?;
    vsd_from_json(&root)
}

pub fn vsd_from_json(root: &Json) -> Result<VirtualSensorDefinition, VsdError> {
    let top = Obj::new(root, "", TOP_KEYS)?;

    let name = top.str("name")?;
    let binding = parse_binding(top.req("binding")?, &top.ptr("binding"))?;
    let sampling = top
        .opt_uint("sampling_interval_ms")?
        .unwrap_or(DEFAULT_SAMPLING_INTERVAL_MS);
    let window = parse_window(top.req("window")?, &top.ptr("window"))?;

    let aggs_json = top
        .req("aggregations")?
        .as_array()
        .ok_or_else(|| VsdError::schema(top.ptr("aggregations"), "expected an array"))?;
    let mut aggregations = Vec::with_capacity(aggs_json.len());
    for (i, a) in aggs_json.iter().enumerate() {
        let path = format!("{}/{i}", top.ptr("aggregations"));
        let obj = Obj::new(a, &path, AGG_KEYS)?;
        let field = obj.str("field")?;
        let func_name = obj.str("fn")?;
        let func = AggFn::parse(func_name).ok_or_else(|| {
            VsdError::schema(obj.ptr("fn"), format!("unknown aggregation {func_name:?}"))
        })?;
        aggregations.push(
            Aggregation::new(field, func).map_err(|e| VsdError::invariant(obj.ptr("field"), e))?,
        );
    }

    let emit = top.uint("emit_interval_ms")?;
    let history = top.uint("history_size")?;
    let description = top.opt_str("description")?.map(String::from);

    VirtualSensorDefinition::new(
        name,
        binding,
        sampling,
        window,
        aggregations,
        emit,
        history,
        description,
    )
    .map_err(|e| {
        let key = match &e {
            ModelError::BadIdentifier(_) => "name",
            ModelError::NotPositive(k) => k,
            ModelError::EmitFasterThanSampling { .. } => "emit_interval_ms",
            ModelError::NoAggregations | ModelError::DuplicateAggregation(_) => "aggregations",
            _ => "",
        };
        VsdError::invariant(top.ptr(key), e)
    })
}

fn parse_binding(v: &Json, path: &str) -> Result<PluginBinding, VsdError> {
    let obj = Obj::new(v, path, BINDING_KEYS)?;
    let plugin_id = obj.str("plugin_id")?;
    let transport = match obj.str("transport")? {
        "in_process" => Transport::InProcess,
        "subprocess" => Transport::Subprocess,
        other => {
            return Err(VsdError::schema(
                obj.ptr("transport"),
                format!("unknown transport {other:?}"),
            ))
        }
    };
    let command = obj
        .opt("command")
        .map(|c| {
            let arr = c
                .as_array()
                .ok_or_else(|| VsdError::schema(obj.ptr("command"), "expected an array"))?;
            arr.iter()
                .enumerate()
                .map(|(i, s)| {
                    s.as_str().map(String::from).ok_or_else(|| {
                        VsdError::schema(format!("{}/{i}", obj.ptr("command")), "expected a string")
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let config_json = obj
        .req("config")?
        .as_object()
        .ok_or_else(|| VsdError::schema(obj.ptr("config"), "expected an object"))?;
    let mut config = BTreeMap::new();
    for (k, v) in config_json {
        let s = v.as_str().ok_or_else(|| {
            VsdError::schema(format!("{}/{k}", obj.ptr("config")), "expected a string")
        })?;
        config.insert(k.clone(), s.to_string());
    }
    PluginBinding::new(plugin_id, transport, command, config)
        .map_err(|e| VsdError::invariant(obj.ptr("command"), e))
}

fn parse_window(v: &Json, path: &str) -> Result<WindowSpec, VsdError> {
    let obj = Obj::new(v, path, WINDOW_KEYS)?;
    let kind = match obj.str("kind")? {
        "count" => WindowKind::Count,
        "time" => WindowKind::Time,
        other => {
            return Err(VsdError::schema(
                obj.ptr("kind"),
                format!("unknown window kind {other:?}"),
            ))
        }
    };
    let size = obj.uint("size")?;
    WindowSpec::new(kind, size).map_err(|e| VsdError::invariant(obj.ptr("size"), e))
}

/// JSON form of a definition, keys in schema order. Defaults are written
/// out explicitly.
pub fn vsd_to_json(vsd: &VirtualSensorDefinition) -> Json {
    let mut binding = Map::new();
    binding.insert("plugin_id".into(), vsd.binding.plugin_id().into());
    binding.insert(
        "transport".into(),
        vsd.binding.transport().to_string().into(),
    );
    if let Some(cmd) = vsd.binding.command() {
        binding.insert("command".into(), cmd.to_vec().into());
    }
    binding.insert(
        "config".into(),
        Json::Object(
            vsd.binding
                .config()
                .iter()
                .map(|(k, v)| (k.clone(), Json::String(v.clone())))
                .collect(),
        ),
    );

    let mut window = Map::new();
    window.insert(
        "kind".into(),
        match vsd.window.kind() {
            WindowKind::Count => "count",
            WindowKind::Time => "time",
        }
        .into(),
    );
    window.insert("size".into(), vsd.window.size().into());

    let aggs = vsd
        .aggregations
        .iter()
        .map(|a| {
            let mut m = Map::new();
            m.insert("field".into(), a.field().into());
            m.insert("fn".into(), a.func().as_str().into());
            Json::Object(m)
        })
        .collect::<Vec<_>>();

    let mut top = Map::new();
    top.insert("name".into(), vsd.name.clone().into());
    top.insert("binding".into(), Json::Object(binding));
    top.insert(
        "sampling_interval_ms".into(),
        vsd.sampling_interval_ms.into(),
    );
    top.insert("window".into(), Json::Object(window));
    top.insert("aggregations".into(), Json::Array(aggs));
    top.insert("emit_interval_ms".into(), vsd.emit_interval_ms.into());
    top.insert("history_size".into(), vsd.history_size.into());
    if let Some(d) = &vsd.description {
        top.insert("description".into(), d.clone().into());
    }
    Json::Object(top)
}

pub fn serialize_vsd(vsd: &VirtualSensorDefinition) -> Vec<u8> {
    serde_json::to_vec(&vsd_to_json(vsd)).expect("JSON values always serialize")
}
