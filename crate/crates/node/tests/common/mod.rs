#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::Router;
use mosden_core::vsd::vsd_from_json;
use mosden_core::VirtualSensorDefinition;
use mosden_node::plugin_host::HostConfig;
use mosden_node::{api, Node, NodeOptions};
use mosden_runtime::{Clock, HttpClient, RouterClient};
use parking_lot::Mutex;
use serde_json::{json, Value};

pub const EPOCH: i64 = 1_700_000_000_000;
pub const SINK: &str = "http://sink:9000";

pub fn vsd(v: Value) -> VirtualSensorDefinition {
    vsd_from_json(&v).unwrap_or_else(|e| panic!("test VSD invalid: {e}"))
}

/// In-process sim sensor, sampled at `sampling_ms`, averaging `temp` over
/// the last 60 rows.
pub fn sim_vsd(name: &str, config: Value, sampling_ms: u64, emit_ms: u64) -> VirtualSensorDefinition {
    vsd(json!({
        "name": name,
        "binding": {"plugin_id": "sim", "transport": "in_process", "config": config},
        "sampling_interval_ms": sampling_ms,
        "window": {"kind": "count", "size": 60},
        "aggregations": [{"field": "temp", "fn": "avg"}, {"field": "temp", "fn": "count"}],
        "emit_interval_ms": emit_ms,
        "history_size": 1000
    }))
}

pub struct TestNode {
    pub node: Arc<Node>,
    pub url: String,
}

/// A node on a virtual clock, reachable through `net` at `url`.
pub fn mock_node(net: &RouterClient, id: &str, data_dir: Option<PathBuf>) -> TestNode {
    let url = format!("http://{id}:8080");
    let mut opts = NodeOptions::new(id, &url);
    opts.clock = Clock::starting_at(EPOCH);
    opts.http = Arc::new(net.clone());
    opts.data_dir = data_dir;
    opts.host = HostConfig::default();
    let node = Node::new(opts);
    net.mount(&url, api::router(node.clone()));
    TestNode { node, url }
}

pub async fn get_json(net: &RouterClient, url: &str) -> (u16, Value) {
    let r = net.get(url).await.unwrap();
    (r.status, r.json().unwrap_or(Value::Null))
}

pub async fn post_json(net: &RouterClient, url: &str, body: Value) -> (u16, Value) {
    let r = net.post_json(url, body.to_string().into_bytes()).await.unwrap();
    (r.status, r.json().unwrap_or(Value::Null))
}

/// Delivery endpoint recording every accepted body. `fail_next` makes the
/// next N requests answer 503.
#[derive(Clone, Default)]
pub struct Sink {
    pub received: Arc<Mutex<Vec<(Value, usize)>>>,
    pub fail_next: Arc<AtomicU32>,
    pub attempts: Arc<AtomicU32>,
}

impl Sink {
    pub fn mount(net: &RouterClient) -> Self {
        let sink = Sink::default();
        let app = Router::new()
            .route("/ingest", post(ingest))
            .with_state(sink.clone());
        net.mount(SINK, app);
        sink
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.received.lock().iter().map(|(v, _)| v.clone()).collect()
    }

    pub fn endpoint() -> String {
        format!("{SINK}/ingest")
    }
}

async fn ingest(State(s): State<Sink>, body: Bytes) -> StatusCode {
    s.attempts.fetch_add(1, Ordering::SeqCst);
    let failing = s
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if failing {
        return StatusCode::SERVICE_UNAVAILABLE;
    }
    let v: Value = serde_json::from_slice(&body).unwrap();
    s.received.lock().push((v, body.len()));
    StatusCode::OK
}

/// Path of the reference plugin executable, building it if needed.
pub fn sim_plugin_exe() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let dir = exe.parent().unwrap().parent().unwrap();
    let bin = dir.join(format!("mosden-sim-plugin{}", std::env::consts::EXE_SUFFIX));
    if !bin.exists() {
        let status = std::process::Command::new(env!("CARGO"))
            .args(["build", "-p", "mosden-core", "--bin", "mosden-sim-plugin"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    bin
}

/// A plugin directory holding the reference plugin's manifest.
pub fn sim_plugin_dir(root: &std::path::Path) -> PathBuf {
    let dir = root.join("plugins").join("sim");
    std::fs::create_dir_all(&dir).unwrap();
    let manifest = json!({
        "plugin_id": "sim",
        "version": "1.0.0",
        "action": mosden_core::protocol::PICK_PLUGIN_ACTION,
        "size_bytes": 25_000,
        "categories": ["temperature"],
        "command": [sim_plugin_exe().to_string_lossy()]
    });
    std::fs::write(dir.join("plugin.json"), manifest.to_string()).unwrap();
    root.join("plugins")
}

pub fn subprocess_binding(config: Value) -> Value {
    json!({
        "plugin_id": "sim",
        "transport": "subprocess",
        "command": [sim_plugin_exe().to_string_lossy()],
        "config": config
    })
}
