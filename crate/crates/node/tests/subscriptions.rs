mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::*;
use mosden_runtime::{HttpClient, RouterClient};
use serde_json::{json, Value};
use tokio::time::sleep;

async fn subscribe(net: &RouterClient, n: &TestNode, body: Value) -> (u16, Value) {
    post_json(net, &format!("{}/subscriptions", n.url), body).await
}

fn push(vs: &str, interval_ms: u64, expiry: i64) -> Value {
    json!({
        "vs_name": vs, "mode": "push", "delivery_endpoint": Sink::endpoint(),
        "interval_ms": interval_ms, "expiry": expiry
    })
}

fn seqs(bodies: &[Value]) -> Vec<u64> {
    bodies.iter().map(|b| b["sequence_no"].as_u64().unwrap()).collect()
}

#[tokio::test(start_paused = true)]
async fn push_until_expiry() {
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1", "kind": "ramp"}), 1000, 1000))
        .await
        .unwrap();
    let now = n.node.clock().now_ms();
    let expiry = now + 10_000;
    let (s, sub) = subscribe(&net, &n, push("t", 1000, expiry)).await;
    assert_eq!(s, 201);
    assert_eq!(sub["id"], "sub-1");
    assert_eq!(sub["created_at"], now);
    sleep(Duration::from_secs(30)).await;

    let bodies = sink.bodies();
    assert!((9..=11).contains(&bodies.len()), "{}", bodies.len());
    assert_eq!(seqs(&bodies), (0..bodies.len() as u64).collect::<Vec<_>>());
    for b in &bodies {
        assert_eq!(b["subscription_id"], "sub-1");
        assert!(b["sent_at"].as_i64().unwrap() <= expiry);
        assert_eq!(b["payload"]["kind"], "processed");
        assert_eq!(b["payload"]["vs_name"], "t");
    }
    let keys: Vec<&String> = bodies[0].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["subscription_id", "sequence_no", "sent_at", "payload"]);
    // expired subscriptions disappear from the listing
    assert_eq!(get_json(&net, &format!("{}/subscriptions", n.url)).await.1, json!([]));
}

#[tokio::test(start_paused = true)]
async fn creation_errors() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
        .await
        .unwrap();
    let now = n.node.clock().now_ms();
    let cases = [
        (push("t", 1000, now - 1), 400, "ExpiredOnArrival"),
        (push("t", 1000, now), 400, "ExpiredOnArrival"),
        (push("nope", 1000, now + 1000), 404, "UnknownVirtualSensor"),
        (
            json!({"vs_name": "t", "mode": "push", "interval_ms": 1000, "expiry": now + 1000}),
            400,
            "BadEndpoint",
        ),
        (
            json!({"vs_name": "t", "mode": "push", "delivery_endpoint": "not a url",
                   "interval_ms": 1000, "expiry": now + 1000}),
            400,
            "BadEndpoint",
        ),
        (
            json!({"vs_name": "t", "mode": "push", "delivery_endpoint": Sink::endpoint(),
                   "interval_ms": 1000, "expiry": now + 1000,
                   "aggregations": [{"field": "hum", "fn": "avg"}]}),
            400,
            "FieldNotInSchema",
        ),
        (json!({"vs_name": "t"}), 400, "MalformedRequest"),
    ];
    for (body, status, code) in cases {
        let (s, e) = subscribe(&net, &n, body.clone()).await;
        assert_eq!((s, e["error"].as_str()), (status, Some(code)), "{body}");
    }
}

#[tokio::test(start_paused = true)]
async fn thirty_concurrent_subscriptions() {
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
        .await
        .unwrap();
    let expiry = n.node.clock().now_ms() + 60_000;
    for _ in 0..30 {
        assert_eq!(subscribe(&net, &n, push("t", 1000, expiry)).await.0, 201);
    }
    let (_, list) = get_json(&net, &format!("{}/subscriptions", n.url)).await;
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|s| s["id"].as_str().unwrap()).collect();
    let expected: Vec<String> = (1..=30).map(|i| format!("sub-{i}")).collect();
    assert_eq!(ids, expected);
    sleep(Duration::from_millis(5_500)).await;
    assert_eq!(sink.bodies().len(), 30 * 5);
    let (_, m) = get_json(&net, &format!("{}/metrics", n.url)).await;
    assert_eq!(m["messages_sent"], 150);
    for (_, s) in m["subscriptions"].as_object().unwrap() {
        assert_eq!(s["deliveries"], 5);
        assert_eq!(s["drops"], 0);
    }
}

#[tokio::test(start_paused = true)]
async fn retries_and_drops() {
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 5000))
        .await
        .unwrap();
    let expiry = n.node.clock().now_ms() + 60_000;
    subscribe(&net, &n, push("t", 5000, expiry)).await;

    // first delivery (t = 5 s) fails once and succeeds on the retry
    sink.fail_next.store(1, Ordering::SeqCst);
    sleep(Duration::from_millis(6_000)).await;
    assert_eq!(seqs(&sink.bodies()), [0]);
    assert_eq!(sink.attempts.load(Ordering::SeqCst), 2);

    // second delivery (t = 10 s) fails all four attempts and is dropped
    // attempts at 10, 10.25, 10.75 and 11.75 s
    sink.fail_next.store(4, Ordering::SeqCst);
    sleep(Duration::from_millis(6_000)).await;
    assert_eq!(sink.attempts.load(Ordering::SeqCst), 6);
    assert_eq!(seqs(&sink.bodies()), [0]);

    // the subscription survives; the next one carries the next number
    sleep(Duration::from_millis(3_500)).await;
    assert_eq!(seqs(&sink.bodies()), [0, 2]);
    let (_, m) = get_json(&net, &format!("{}/metrics", n.url)).await;
    let s = &m["subscriptions"]["sub-1"];
    assert_eq!((s["deliveries"].as_u64(), s["retries"].as_u64(), s["drops"].as_u64()), (Some(2), Some(4), Some(1)));
    assert_eq!(s["active"], true);
}

#[tokio::test(start_paused = true)]
async fn unreachable_endpoint_drops_without_cancelling() {
    let net = RouterClient::new();
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
        .await
        .unwrap();
    let expiry = n.node.clock().now_ms() + 20_000;
    let body = json!({
        "vs_name": "t", "mode": "push", "delivery_endpoint": "http://gone:1/ingest",
        "interval_ms": 5000, "expiry": expiry
    });
    subscribe(&net, &n, body).await;
    sleep(Duration::from_millis(12_000)).await;
    let (_, list) = get_json(&net, &format!("{}/subscriptions", n.url)).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    let (_, m) = get_json(&net, &format!("{}/metrics", n.url)).await;
    assert_eq!(m["subscriptions"]["sub-1"]["drops"], 2);
    assert_eq!(m["messages_sent"], 0);
}

#[tokio::test(start_paused = true)]
async fn one_delivery_counts_its_bytes() {
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
        .await
        .unwrap();
    let expiry = n.node.clock().now_ms() + 1_500;
    subscribe(&net, &n, push("t", 1000, expiry)).await;
    sleep(Duration::from_secs(5)).await;
    let received = sink.received.lock().clone();
    assert_eq!(received.len(), 1);
    let (_, m) = get_json(&net, &format!("{}/metrics", n.url)).await;
    assert_eq!(m["messages_sent"], 1);
    assert_eq!(m["bytes_sent"].as_u64(), Some(received[0].1 as u64));
}

#[tokio::test(start_paused = true)]
async fn raw_payloads_carry_each_element_once() {
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1", "kind": "ramp"}), 1000, 1000))
        .await
        .unwrap();
    sleep(Duration::from_millis(2_500)).await;
    let expiry = n.node.clock().now_ms() + 10_000;
    let mut body = push("t", 3000, expiry);
    body["payload"] = json!("raw");
    subscribe(&net, &n, body).await;
    sleep(Duration::from_secs(15)).await;
    let bodies = sink.bodies();
    assert_eq!(bodies.len(), 3);
    let values: Vec<f64> = bodies
        .iter()
        .flat_map(|b| b["payload"]["elements"].as_array().unwrap().clone())
        .map(|e| e["values"]["temp"].as_f64().unwrap())
        .collect();
    // elements appended after subscribing (calls 3..=11), in order, no repeats
    assert_eq!(values, (3..=11).map(f64::from).collect::<Vec<_>>());
    assert!(bodies.iter().all(|b| b["payload"]["lost"] == 0));
}

#[tokio::test(start_paused = true)]
async fn deactivation_sends_cancellation_notice() {
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
        .await
        .unwrap();
    let expiry = n.node.clock().now_ms() + 60_000;
    subscribe(&net, &n, push("t", 1000, expiry)).await;
    sleep(Duration::from_millis(2_500)).await;
    n.node.deactivate("t").await.unwrap();
    sleep(Duration::from_secs(5)).await;
    let bodies = sink.bodies();
    assert_eq!(bodies.len(), 3);
    let last = bodies.last().unwrap();
    assert_eq!(last["sequence_no"], 2);
    assert_eq!(last["payload"]["kind"], "cancelled");
    assert_eq!(last["payload"]["vs_name"], "t");
    assert_eq!(get_json(&net, &format!("{}/subscriptions", n.url)).await.1, json!([]));
}

#[tokio::test(start_paused = true)]
async fn delete_stops_delivery() {
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let n = mock_node(&net, "a", None);
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
        .await
        .unwrap();
    let expiry = n.node.clock().now_ms() + 60_000;
    subscribe(&net, &n, push("t", 1000, expiry)).await;
    sleep(Duration::from_millis(1_500)).await;
    let r = net.delete(&format!("{}/subscriptions/sub-1", n.url)).await.unwrap();
    assert_eq!(r.status, 204);
    sleep(Duration::from_secs(5)).await;
    assert_eq!(sink.bodies().len(), 1);
    let r = net.delete(&format!("{}/subscriptions/sub-1", n.url)).await.unwrap();
    assert_eq!(r.status, 404);
    assert_eq!(r.error_body().unwrap().error, "UnknownSubscription");
}

#[tokio::test(start_paused = true)]
async fn subscriptions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let net = RouterClient::new();
    let sink = Sink::mount(&net);
    let expiry;
    {
        let n = mock_node(&net, "a", Some(dir.path().to_path_buf()));
        n.node
            .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
            .await
            .unwrap();
        expiry = n.node.clock().now_ms() + 30_000;
        subscribe(&net, &n, push("t", 1000, expiry)).await;
        sleep(Duration::from_millis(3_500)).await;
        n.node.shutdown().await;
        net.unmount(&n.url);
    }
    assert_eq!(seqs(&sink.bodies()), [0, 1, 2]);

    let n = mock_node(&net, "a", Some(dir.path().to_path_buf()));
    n.node
        .activate(sim_vsd("t", json!({"seed": "1"}), 1000, 1000))
        .await
        .unwrap();
    assert_eq!(n.node.subscriptions().restore(), 1);
    let (_, list) = get_json(&net, &format!("{}/subscriptions", n.url)).await;
    assert_eq!(list[0]["id"], "sub-1");
    assert_eq!(list[0]["expiry"], expiry);
    sleep(Duration::from_millis(2_500)).await;
    let s = seqs(&sink.bodies());
    assert_eq!(&s[..5], [0, 1, 2, 3, 4]);
    // new ids continue after the restored ones
    let (_, sub) = subscribe(&net, &n, push("t", 1000, expiry)).await;
    assert_eq!(sub["id"], "sub-2");
}
