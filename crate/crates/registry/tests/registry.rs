use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use mosden_core::VirtualSensorDefinition;
use mosden_node::{api, Node, NodeOptions};
use mosden_registry::{Registry, RegistryOptions, UserRequest, DEFAULT_LIVENESS_MS};
use mosden_runtime::{Clock, HttpClient, RouterClient};
use serde_json::{json, Value};
use tokio::time::sleep;

const EPOCH: i64 = 1_700_000_000_000;
const REGISTRY: &str = "http://registry:7000";

fn open_registry(net: &RouterClient, dir: &Path) -> Arc<Registry> {
    open_registry_at(net, dir, EPOCH)
}

fn open_registry_at(net: &RouterClient, dir: &Path, now: i64) -> Arc<Registry> {
    let r = Registry::open(RegistryOptions {
        clock: Clock::starting_at(now),
        http: Arc::new(net.clone()),
        data_dir: dir.to_path_buf(),
        public_url: REGISTRY.into(),
        liveness_ms: DEFAULT_LIVENESS_MS,
    })
    .unwrap();
    net.mount(REGISTRY, mosden_registry::api::router(r.clone()));
    r
}

fn node(net: &RouterClient, id: &str) -> Arc<Node> {
    let url = format!("http://{id}:8080");
    let mut opts = NodeOptions::new(id, &url);
    opts.clock = Clock::starting_at(EPOCH);
    opts.http = Arc::new(net.clone());
    let n = Node::new(opts);
    net.mount(&url, api::router(n.clone()));
    n
}

fn sensor(name: &str, kind: &str) -> VirtualSensorDefinition {
    mosden_core::vsd::vsd_from_json(&json!({
        "name": name,
        "binding": {"plugin_id": "sim", "transport": "in_process",
                    "config": {"seed": "3", "kind": "ramp", "type": kind}},
        "sampling_interval_ms": 1000,
        "window": {"kind": "count", "size": 5},
        "aggregations": [{"field": "temp", "fn": "avg"}],
        "emit_interval_ms": 1000,
        "history_size": 100
    }))
    .unwrap()
}

async fn node_with(net: &RouterClient, id: &str, sensors: &[(&str, &str)]) -> Arc<Node> {
    let n = node(net, id);
    for (name, kind) in sensors {
        n.activate(sensor(name, kind)).await.unwrap();
    }
    n.register_with(REGISTRY).await.unwrap();
    n
}

async fn call(net: &RouterClient, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
    let url = format!("{REGISTRY}{path}");
    let r = match method {
        "GET" => net.get(&url).await,
        _ => {
            net.post_json(&url, body.unwrap().to_string().into_bytes())
                .await
        }
    }
    .unwrap();
    (r.status, r.json().unwrap_or(Value::Null))
}

fn temperature_request(id: Option<&str>, interval_ms: u64, duration_ms: u64) -> Value {
    let mut v = json!({
        "criteria": {"type": "temperature"},
        "interval_ms": interval_ms,
        "duration_ms": duration_ms
    });
    if let Some(id) = id {
        v["id"] = json!(id);
    }
    v
}

fn pairs(v: &Value) -> Vec<(String, String)> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["node_id"].as_str().unwrap().to_string(),
                r["vs_name"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

fn p(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

#[tokio::test(start_paused = true)]
async fn three_nodes_register_independently() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    open_registry(&net, dir.path());
    node_with(&net, "c", &[("t", "temperature")]).await;
    node_with(&net, "a", &[("t", "temperature"), ("h", "humidity")]).await;
    let b = node_with(&net, "b", &[("light", "light")]).await;
    let (s, list) = call(&net, "GET", "/registry/sensors", None).await;
    assert_eq!(s, 200);
    assert_eq!(
        pairs(&list),
        [p("a", "h"), p("a", "t"), p("b", "light"), p("c", "t")]
    );
    assert_eq!(list[0]["node_base_url"], "http://a:8080");
    assert_eq!(list[0]["metadata"]["type"], "humidity");

    // re-registration with changed metadata updates in place
    b.deactivate("light").await.unwrap();
    b.activate(sensor("light", "lux")).await.unwrap();
    b.register_with(REGISTRY).await.unwrap();
    let (_, list) = call(&net, "GET", "/registry/sensors", None).await;
    assert_eq!(list.as_array().unwrap().len(), 4);
    assert_eq!(list[2]["metadata"]["type"], "lux");

    let empty = json!({"node_id": "d", "base_url": "http://d:8080", "descriptors": []});
    assert_eq!(
        call(&net, "POST", "/registry/sensors", Some(empty)).await.0,
        200
    );
    let bad = json!({"node_id": "d", "base_url": "nope", "descriptors": []});
    let (s, e) = call(&net, "POST", "/registry/sensors", Some(bad)).await;
    assert_eq!((s, e["error"].as_str()), (400, Some("InvalidDescriptor")));
    assert_eq!(
        call(&net, "GET", "/registry/sensors", None)
            .await
            .1
            .as_array()
            .unwrap()
            .len(),
        4
    );
}

#[tokio::test(start_paused = true)]
async fn dispatch_spans_nodes_and_reports_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    open_registry(&net, dir.path());
    let a = node_with(&net, "a", &[("t1", "temperature"), ("t2", "temperature")]).await;
    let b = node_with(&net, "b", &[("t3", "temperature"), ("h", "humidity")]).await;
    let (s, rec) = call(
        &net,
        "POST",
        "/registry/requests",
        Some(temperature_request(None, 1000, 10_000)),
    )
    .await;
    assert_eq!(s, 201);
    assert_eq!(rec["id"], "req-1");
    assert_eq!(
        pairs(&rec["subscriptions"]),
        [p("a", "t1"), p("a", "t2"), p("b", "t3")]
    );
    for sub in rec["subscriptions"].as_array().unwrap() {
        assert_eq!(sub["expiry"], EPOCH + 10_000);
    }
    assert_eq!(a.subscriptions().list().len(), 2);
    assert_eq!(b.subscriptions().list().len(), 1);

    // c registers, then drops off the network
    node_with(&net, "c", &[("t4", "temperature")]).await;
    net.unmount("http://c:8080");
    let (s, rec) = call(
        &net,
        "POST",
        "/registry/requests",
        Some(temperature_request(None, 1000, 10_000)),
    )
    .await;
    assert_eq!(s, 201);
    assert_eq!(rec["subscriptions"].as_array().unwrap().len(), 3);
    assert_eq!(pairs(&rec["failures"]), [p("c", "t4")]);
    assert_eq!(rec["failures"][0]["error"], "NodeUnreachable");

    let only_c = json!({"criteria": {"node_id": "c"}, "interval_ms": 1000, "duration_ms": 5000});
    let (s, e) = call(&net, "POST", "/registry/requests", Some(only_c)).await;
    assert_eq!((s, e["error"].as_str()), (502, Some("DispatchFailed")));

    let none = json!({"criteria": {"type": "sound"}, "interval_ms": 1000, "duration_ms": 5000});
    let (s, e) = call(&net, "POST", "/registry/requests", Some(none)).await;
    assert_eq!((s, e["error"].as_str()), (404, Some("NoMatch")));
    for bad in [
        json!({"criteria": {}, "interval_ms": 1000, "duration_ms": 0}),
        json!({"criteria": {}, "interval_ms": 1000}),
        json!({"criteria": {}, "interval_ms": 1000, "duration_ms": 10, "id": "../x"}),
    ] {
        let (s, e) = call(&net, "POST", "/registry/requests", Some(bad)).await;
        assert_eq!((s, e["error"].as_str()), (400, Some("InvalidRequest")));
    }
}

#[tokio::test(start_paused = true)]
async fn retries_never_duplicate_subscriptions() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    open_registry(&net, dir.path());
    let a = node_with(&net, "a", &[("t1", "temperature")]).await;
    let b = node_with(&net, "b", &[("t2", "temperature")]).await;
    net.unmount("http://b:8080");
    let req = temperature_request(Some("job-7"), 1000, 60_000);
    let (s, first) = call(&net, "POST", "/registry/requests", Some(req.clone())).await;
    assert_eq!(s, 201);
    assert_eq!(pairs(&first["failures"]), [p("b", "t2")]);

    // b comes back; the retry fills the gap and leaves a's subscription alone
    net.mount("http://b:8080", api::router(b.clone()));
    sleep(Duration::from_secs(5)).await;
    let (s, second) = call(&net, "POST", "/registry/requests", Some(req.clone())).await;
    assert_eq!(s, 201);
    assert_eq!(
        pairs(&second["subscriptions"]),
        [p("a", "t1"), p("b", "t2")]
    );
    assert_eq!(second["subscriptions"][0], first["subscriptions"][0]);
    assert_eq!(second["failures"], json!([]));
    // the deadline belongs to the first attempt
    assert_eq!(second["subscriptions"][1]["expiry"], EPOCH + 60_000);

    let (_, third) = call(&net, "POST", "/registry/requests", Some(req)).await;
    assert_eq!(third["subscriptions"], second["subscriptions"]);
    assert_eq!(a.subscriptions().list().len(), 1);
    assert_eq!(b.subscriptions().list().len(), 1);
    let (_, listed) = call(&net, "GET", "/registry/requests", None).await;
    assert_eq!(listed.as_array().unwrap().len(), 1);
}

#[tokio::test(start_paused = true)]
async fn ingest_dedupes_and_quarantines() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    let reg = open_registry(&net, dir.path());
    node_with(&net, "a", &[("t", "temperature")]).await;
    let (_, rec) = call(
        &net,
        "POST",
        "/registry/requests",
        Some(temperature_request(Some("r"), 1000, 1)),
    )
    .await;
    let sub = rec["subscriptions"][0]["subscription_id"]
        .as_str()
        .unwrap()
        .to_string();
    let (s, rows) = call(&net, "GET", "/registry/requests/r/results", None).await;
    assert_eq!((s, rows), (200, json!([])));

    let delivery = |seq: u64| json!({"subscription_id": sub, "sequence_no": seq, "sent_at": 5, "payload": {"kind": "raw"}});
    let (s, v) = call(&net, "POST", "/registry/ingest?node=a", Some(delivery(0))).await;
    assert_eq!((s, v["status"].as_str()), (200, Some("stored")));
    let (s, v) = call(&net, "POST", "/registry/ingest?node=a", Some(delivery(0))).await;
    assert_eq!((s, v["status"].as_str()), (200, Some("duplicate")));
    call(&net, "POST", "/registry/ingest?node=a", Some(delivery(1))).await;
    // same subscription id on another node is a different subscription
    let (s, v) = call(&net, "POST", "/registry/ingest?node=b", Some(delivery(2))).await;
    assert_eq!((s, v["status"].as_str()), (202, Some("quarantined")));
    let (s, _) = call(&net, "POST", "/registry/ingest", Some(delivery(3))).await;
    assert_eq!(s, 202);
    let (s, e) = call(
        &net,
        "POST",
        "/registry/ingest?node=a",
        Some(json!({"sequence_no": 1})),
    )
    .await;
    assert_eq!((s, e["error"].as_str()), (400, Some("MalformedDelivery")));

    let (_, rows) = call(&net, "GET", "/registry/requests/r/results", None).await;
    let seqs: Vec<u64> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["sequence_no"].as_u64().unwrap())
        .collect();
    assert_eq!(seqs, [0, 1]);
    assert_eq!(rows[0]["vs_name"], "t");
    assert_eq!(rows[0]["node_id"], "a");
    assert_eq!(rows[0]["received_at"], EPOCH);
    let quarantine =
        std::fs::read_to_string(dir.path().join(mosden_registry::QUARANTINE_FILE)).unwrap();
    assert_eq!(quarantine.lines().count(), 2);
    let st = reg.stats();
    assert_eq!((st.ingested, st.duplicates, st.quarantined), (2, 1, 2));
    let (s, e) = call(&net, "GET", "/registry/requests/nope/results", None).await;
    assert_eq!((s, e["error"].as_str()), (404, Some("UnknownRequest")));
    assert_eq!(
        call(&net, "GET", "/registry/requests/nope", None).await.0,
        404
    );
}

#[tokio::test(start_paused = true)]
async fn stale_nodes_are_not_matched() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    open_registry(&net, dir.path());
    node_with(&net, "quiet", &[("t", "temperature")]).await;
    let chatty = node_with(&net, "chatty", &[("t", "temperature")]).await;
    let beat = chatty.spawn_heartbeat(REGISTRY.into(), Duration::from_secs(10));
    sleep(Duration::from_millis(30_500)).await;
    let (_, live) = call(&net, "GET", "/registry/sensors?live=true", None).await;
    assert_eq!(pairs(&live), [p("chatty", "t")]);
    let (_, all) = call(&net, "GET", "/registry/sensors", None).await;
    assert_eq!(all.as_array().unwrap().len(), 2);
    let (s, rec) = call(
        &net,
        "POST",
        "/registry/requests",
        Some(temperature_request(None, 1000, 5000)),
    )
    .await;
    assert_eq!(s, 201);
    assert_eq!(pairs(&rec["subscriptions"]), [p("chatty", "t")]);
    beat.abort();
}

#[tokio::test(start_paused = true)]
async fn heartbeat_makes_new_sensors_visible_within_the_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    open_registry(&net, dir.path());
    let n = node(&net, "a");
    let beat = n.spawn_heartbeat(REGISTRY.into(), Duration::from_secs(10));
    sleep(Duration::from_secs(1)).await;
    n.activate(sensor("late", "temperature")).await.unwrap();
    let mut seen_after = None;
    for s in 1..=30 {
        sleep(Duration::from_secs(1)).await;
        let (_, live) = call(&net, "GET", "/registry/sensors?live=true", None).await;
        if !live.as_array().unwrap().is_empty() {
            seen_after = Some(s);
            break;
        }
    }
    assert!(seen_after.is_some_and(|s| s <= 30), "{seen_after:?}");
    beat.abort();
}

#[tokio::test(start_paused = true)]
async fn ingested_counts_stay_within_duration_over_interval() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    open_registry(&net, dir.path());
    node_with(&net, "a", &[("t1", "temperature"), ("t2", "temperature")]).await;
    node_with(&net, "b", &[("t3", "temperature")]).await;
    for (id, d, i) in [
        ("d60i5", 60_000u64, 5_000u64),
        ("d20i3", 20_000, 3_000),
        ("d7i1", 7_000, 1_000),
    ] {
        let (s, _) = call(
            &net,
            "POST",
            "/registry/requests",
            Some(temperature_request(Some(id), i, d)),
        )
        .await;
        assert_eq!(s, 201);
    }
    sleep(Duration::from_secs(90)).await;
    for (id, d, i) in [
        ("d60i5", 60_000u64, 5_000u64),
        ("d20i3", 20_000, 3_000),
        ("d7i1", 7_000, 1_000),
    ] {
        let (_, rows) = call(
            &net,
            "GET",
            &format!("/registry/requests/{id}/results"),
            None,
        )
        .await;
        let (lo, hi) = ((d / i) - 1, d.div_ceil(i) + 1);
        for (node, vs) in [("a", "t1"), ("a", "t2"), ("b", "t3")] {
            let mine: Vec<&Value> = rows
                .as_array()
                .unwrap()
                .iter()
                .filter(|r| r["node_id"] == node && r["vs_name"] == vs)
                .collect();
            let n = mine.len() as u64;
            assert!(
                (lo..=hi).contains(&n),
                "{id} {node}/{vs}: {n} not in [{lo}, {hi}]"
            );
            for r in &mine {
                assert!(r["sent_at"].as_i64().unwrap() <= EPOCH + d as i64);
                assert_eq!(r["payload"]["kind"], "processed");
            }
        }
    }
}

#[tokio::test(start_paused = true)]
async fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    let first = open_registry(&net, dir.path());
    node_with(&net, "a", &[("t", "temperature")]).await;
    let (_, rec) = call(
        &net,
        "POST",
        "/registry/requests",
        Some(temperature_request(None, 1000, 3_000)),
    )
    .await;
    sleep(Duration::from_secs(5)).await;
    let (_, before) = call(&net, "GET", "/registry/requests/req-1/results", None).await;
    assert!(!before.as_array().unwrap().is_empty());
    let stats = first.stats();
    let now = first.clock().now_ms();
    net.unmount(REGISTRY);
    drop(first);

    let second = open_registry_at(&net, dir.path(), now);
    assert_eq!(second.request("req-1").unwrap().subscriptions.len(), 1);
    assert_eq!(
        call(&net, "GET", "/registry/sensors", None)
            .await
            .1
            .as_array()
            .unwrap()
            .len(),
        1
    );
    assert_eq!(second.stats().ingested, stats.ingested);
    // redelivery of an already stored message is still a duplicate
    let replay = json!({
        "subscription_id": rec["subscriptions"][0]["subscription_id"],
        "sequence_no": before[0]["sequence_no"], "sent_at": 1, "payload": {}
    });
    let (_, v) = call(&net, "POST", "/registry/ingest?node=a", Some(replay)).await;
    assert_eq!(v["status"], "duplicate");
    // ids keep counting from where they were
    let (_, rec) = call(
        &net,
        "POST",
        "/registry/requests",
        Some(temperature_request(None, 1000, 3_000)),
    )
    .await;
    assert_eq!(rec["id"], "req-2", "{rec}");
    let (_, after) = call(&net, "GET", "/registry/requests/req-1/results", None).await;
    assert_eq!(after, before);
}

#[test]
fn request_bodies_reject_unknown_fields() {
    let r: Result<UserRequest, _> = serde_json::from_value(
        json!({"criteria": {}, "interval_ms": 1, "duration_ms": 1, "colour": "red"}),
    );
    assert!(r.is_err());
    let r: UserRequest = serde_json::from_value(json!({
        "criteria": {"type": "temperature"}, "interval_ms": 1000, "duration_ms": 60000,
        "window": {"kind": "time", "size": 60000},
        "aggregations": [{"field": "temp", "fn": "max"}],
        "payload": "raw"
    }))
    .unwrap();
    assert_eq!(serde_json::to_value(&r).unwrap()["window"]["kind"], "time");
}
