mod common;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use common::*;
use mosden_core::protocol::{PluginReply, PluginRequest};
use mosden_core::stream::Journal;
use mosden_core::Value;
use mosden_node::plugin_host::{HostError, InProcessPlugin, PluginState};
use mosden_node::{EngineError, NodeError};
use mosden_runtime::RouterClient;
use parking_lot::Mutex;
use serde_json::json;
use tokio::time::{sleep, Instant};

fn ramp(seed: u64) -> serde_json::Value {
    json!({"seed": seed.to_string(), "kind": "ramp"})
}

#[tokio::test(start_paused = true)]
async fn activation_checks_aggregation_fields() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    n.node.activate(sim_vsd("t", ramp(1), 1000, 1000)).await.unwrap();

    let bad = vsd(json!({
        "name": "h",
        "binding": {"plugin_id": "sim", "transport": "in_process", "config": {"seed": "1"}},
        "window": {"kind": "count", "size": 60},
        "aggregations": [{"field": "hum", "fn": "avg"}],
        "emit_interval_ms": 1000, "history_size": 10
    }));
    match n.node.activate(bad).await {
        Err(NodeError::Engine(EngineError::FieldNotInSchema(f))) => assert_eq!(f, "hum"),
        other => panic!("{other:?}"),
    }
    assert!(n.node.engine().get("h").is_none());
    assert_eq!(n.node.engine().active().len(), 1);
}

#[tokio::test(start_paused = true)]
async fn unknown_plugin_and_rejected_config() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    let v = vsd(json!({
        "name": "x",
        "binding": {"plugin_id": "nope", "transport": "in_process", "config": {}},
        "window": {"kind": "count", "size": 1},
        "aggregations": [{"field": "temp", "fn": "last"}],
        "emit_interval_ms": 1000, "history_size": 10
    }));
    assert!(matches!(
        n.node.activate(v).await,
        Err(NodeError::Engine(EngineError::Host(HostError::UnknownPlugin(_))))
    ));
    match n.node.activate(sim_vsd("x", json!({}), 1000, 1000)).await {
        Err(NodeError::Engine(EngineError::Host(HostError::PluginRejectedConfig(msg)))) => {
            assert!(msg.contains("seed"))
        }
        other => panic!("{other:?}"),
    }
}

#[tokio::test(start_paused = true)]
async fn thirteen_sensors_sample_independently() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    for i in 0..13 {
        n.node
            .activate(sim_vsd(&format!("s{i}"), ramp(i), 1000, 1000))
            .await
            .unwrap();
    }
    assert_eq!(n.node.engine().active().len(), 13);
    sleep(Duration::from_millis(10_500)).await;
    // ticks at 0, 1, ..., 10 s
    for s in n.node.engine().active() {
        assert_eq!(s.stats().samples_ok(), 11, "{}", s.name());
    }
    n.node.deactivate("s0").await.unwrap();
    sleep(Duration::from_millis(5000)).await;
    let s0 = n.node.engine().get("s0").unwrap();
    assert_eq!(s0.stats().samples_ok(), 11);
    assert_eq!(s0.plugin_state(), PluginState::Stopped);
    let active = n.node.engine().active();
    assert_eq!(active.len(), 12);
    for s in active {
        assert_eq!(s.stats().samples_ok(), 16, "{}", s.name());
        assert_eq!(s.stats().samples_dropped(), 0);
    }
}

#[tokio::test(start_paused = true)]
async fn valid_and_invalid_readings() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    // every second reading carries a string in the double field
    let cfg = json!({"seed": "1", "kind": "ramp", "fault_mode": "wrong_type", "fault_every": "2"});
    let s = n.node.activate(sim_vsd("t", cfg, 1000, 1000)).await.unwrap();
    sleep(Duration::from_millis(9_500)).await;
    // 10 calls: indices 1,3,5,7,9 faulted
    assert_eq!(s.stats().samples_ok(), 5);
    assert_eq!(s.stats().samples_dropped(), 5);
    let values: Vec<Value> = s.store().iter().map(|e| e.values[0].clone()).collect();
    let expected: Vec<Value> = [0.0, 2.0, 4.0, 6.0, 8.0].map(Value::Double).to_vec();
    assert_eq!(values, expected);
    assert_eq!(s.plugin_state(), PluginState::Running);
}

#[tokio::test(start_paused = true)]
async fn duplicate_timestamps_are_dropped_as_out_of_order() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    let cfg = json!({"seed": "1", "fault_mode": "duplicate_timestamp", "fault_every": "3"});
    let s = n.node.activate(sim_vsd("t", cfg, 1000, 1000)).await.unwrap();
    sleep(Duration::from_millis(5_500)).await;
    // calls 0..=5; calls 2 and 5 re-send the first timestamp
    let m = s.metrics();
    assert_eq!((m.samples_ok, m.samples_dropped, m.out_of_order), (4, 2, 2));
    let ts: Vec<i64> = s.store().iter().map(|e| e.timestamp).collect();
    assert!(ts.windows(2).all(|w| w[0] <= w[1]));
}

/// Sleeps `first_ms` on its first reading, then answers immediately;
/// records when each reading started.
struct SlowFirst {
    first_ms: u64,
    calls: Arc<Mutex<Vec<Instant>>>,
    n: u32,
}

#[async_trait]
impl InProcessPlugin for SlowFirst {
    async fn handle(&mut self, req: &PluginRequest) -> PluginReply {
        match req {
            PluginRequest::SetConfiguration { .. } => PluginReply::Ok(json!(null)),
            PluginRequest::GetDataStructure => {
                PluginReply::Ok(json!([{"name": "temp", "value_type": "double"}]))
            }
            PluginRequest::GetReadings => {
                self.calls.lock().push(Instant::now());
                if self.n == 0 {
                    sleep(Duration::from_millis(self.first_ms)).await;
                }
                self.n += 1;
                PluginReply::Ok(json!({"timestamp": self.n, "values": {"temp": 1.0}}))
            }
        }
    }
}

#[tokio::test(start_paused = true)]
async fn overrun_fires_once_immediately_without_burst() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    let calls = Arc::new(Mutex::new(Vec::new()));
    let c = calls.clone();
    n.node.plugins().write().register_in_process(
        "slow",
        Arc::new(move || {
            Box::new(SlowFirst {
                first_ms: 2500,
                calls: c.clone(),
                n: 0,
            }) as Box<dyn InProcessPlugin>
        }),
    );
    let v = vsd(json!({
        "name": "slow",
        "binding": {"plugin_id": "slow", "transport": "in_process", "config": {}},
        "window": {"kind": "count", "size": 5},
        "aggregations": [{"field": "temp", "fn": "count"}],
        "emit_interval_ms": 1000, "history_size": 10
    }));
    let start = Instant::now();
    let s = n.node.activate(v).await.unwrap();
    sleep(Duration::from_millis(3_400)).await;
    assert_eq!(s.stats().samples_ok(), 2);
    sleep(Duration::from_millis(1_200)).await;
    let offsets: Vec<u128> = calls
        .lock()
        .iter()
        .map(|t| (*t - start).as_millis())
        .collect();
    assert_eq!(offsets, [0, 2500, 3500, 4500]);
}

#[tokio::test(start_paused = true)]
async fn deactivate_keeps_history_and_rejects_unknown() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    let s = n.node.activate(sim_vsd("t", ramp(1), 1000, 1000)).await.unwrap();
    sleep(Duration::from_millis(4_500)).await;
    n.node.deactivate("t").await.unwrap();
    let latest = s.store().latest().cloned().unwrap();
    assert_eq!(latest.values, vec![Value::Double(4.0)]);
    let (status, body) = get_json(&net, &format!("{}/sensors/t/data?mode=latest", n.url)).await;
    assert_eq!(status, 200);
    assert_eq!(body["values"]["temp"], json!(4.0));
    match n.node.deactivate("t").await {
        Err(NodeError::Engine(EngineError::UnknownVirtualSensor(name))) => assert_eq!(name, "t"),
        other => panic!("{other:?}"),
    }
    assert!(n.node.deactivate("never").await.is_err());
}

#[tokio::test(start_paused = true)]
async fn stalled_plugin_hits_restart_cap() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    let cfg = json!({"seed": "1", "fault_mode": "stall", "stall_on": "readings"});
    let s = n.node.activate(sim_vsd("t", cfg, 1000, 1000)).await.unwrap();
    // each cycle: 5 s timeout then 1 s backoff; the fourth timeout is final
    sleep(Duration::from_millis(4 * 5000 + 3 * 1000 + 500)).await;
    let m = s.metrics();
    assert_eq!(m.restarts, 3);
    assert_eq!(m.plugin_state, "failed");
    assert_eq!(m.samples_ok, 0);
    sleep(Duration::from_secs(60)).await;
    assert_eq!(s.metrics().restarts, 3);
}

#[tokio::test(start_paused = true)]
async fn journal_replays_on_reactivation_and_is_deterministic() {
    async fn run(dir: &std::path::Path) -> Vec<u8> {
        let net = RouterClient::new();
        let n = mock_node(&net, "a", Some(dir.to_path_buf()));
        let cfg = json!({"seed": "9", "kind": "seeded_noise", "amplitude": "3"});
        let s = n.node.activate(sim_vsd("t", cfg, 1000, 1000)).await.unwrap();
        sleep(Duration::from_millis(20_500)).await;
        n.node.deactivate("t").await.unwrap();
        assert_eq!(s.stats().samples_ok(), 21);
        std::fs::read(Journal::path_for(dir, "t")).unwrap()
    }
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let j1 = run(d1.path()).await;
    let j2 = run(d2.path()).await;
    assert_eq!(j1, j2);
    assert_eq!(j1.iter().filter(|b| **b == b'\n').count(), 21);

    // a fresh node over the same data dir restores the history
    let net = RouterClient::new();
    let n = mock_node(&net, "a", Some(d1.path().to_path_buf()));
    let v = vsd(json!({
        "name": "t",
        "binding": {"plugin_id": "sim", "transport": "in_process",
                    "config": {"seed": "9", "kind": "seeded_noise", "amplitude": "3"}},
        "sampling_interval_ms": 1000,
        "window": {"kind": "count", "size": 60},
        "aggregations": [{"field": "temp", "fn": "avg"}],
        "emit_interval_ms": 1000, "history_size": 5
    }));
    let s = n.node.activate(v).await.unwrap();
    assert_eq!(s.store().len(), 5);
    n.node.deactivate("t").await.unwrap();
}
