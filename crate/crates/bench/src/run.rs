use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use mosden_core::metrics::{HistogramSummary, LatencyHistogram, MetricsSnapshot};
use mosden_core::offload::account;
use mosden_core::vsd::vsd_from_json;
use mosden_core::{EnergyEstimate, VirtualSensorDefinition};
use mosden_node::{Node, NodeOptions};
use mosden_registry::{Registry, RegistryOptions, DEFAULT_LIVENESS_MS};
use mosden_runtime::{Clock, ReqwestClient, RouterClient, SharedHttpClient};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::time::{sleep_until, Instant};

use crate::scenario::{ClockMode, Scenario};

/// Wall-clock origin of mock runs, so repeated runs see identical timestamps.
pub const MOCK_EPOCH: i64 = 1_700_000_000_000;
/// Time allowed after the last expiry for final deliveries and retries.
const GRACE: Duration = Duration::from_secs(3);
const NODE_ID: &str = "bench-node";

/// Everything measured at one point. The CSV carries a subset.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub point: u32,
    pub sensors: u32,
    pub queries: u32,
    /// Samples accepted during the measured `duration_s`.
    pub samples_ok: u64,
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub l1: HistogramSummary,
    pub l2: HistogramSummary,
    pub energy: EnergyEstimate,
    pub wall_cpu_ms: f64,
    pub healthz: HistogramSummary,
    pub healthz_failures: u64,
    /// Deliveries the node completed, over all subscriptions.
    pub deliveries: u64,
    /// Deliveries stored by the registry.
    pub ingested: u64,
    pub drops: u64,
    /// Subscriptions that delivered fewer than `duration / period - 1`
    /// messages.
    pub short_subscriptions: u64,
    pub dispatch_failures: u64,
    /// Stored deliveries per request id.
    pub per_request: BTreeMap<String, u64>,
    pub wall: Duration,
    pub status: String,
}

impl PointResult {
    fn failed(
        point: u32,
        sensors: u32,
        queries: u32,
        err: &anyhow::Error,
        wall: Duration,
        cpu_ms: f64,
    ) -> Self {
        Self {
            point,
            sensors,
            queries,
            samples_ok: 0,
            messages_sent: 0,
            bytes_sent: 0,
            l1: HistogramSummary::default(),
            l2: HistogramSummary::default(),
            energy: EnergyEstimate {
                e_alpha: 0.0,
                e_beta: 0.0,
                breakdown: BTreeMap::new(),
            },
            wall_cpu_ms: cpu_ms,
            healthz: HistogramSummary::default(),
            healthz_failures: 0,
            deliveries: 0,
            ingested: 0,
            drops: 0,
            short_subscriptions: 0,
            dispatch_failures: 0,
            per_request: BTreeMap::new(),
            wall,
            status: format!("error: {err:#}"),
        }
    }

    /// Zero losses, every dispatch accepted and every probe answered.
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn losses(&self) -> u64 {
        self.drops + self.deliveries.saturating_sub(self.ingested)
    }
}

fn cpu_ms() -> f64 {
    cpu_time::ProcessTime::try_now()
        .map(|t| t.as_duration().as_secs_f64() * 1000.0)
        .unwrap_or(0.0)
}

/// Runs one point on a fresh runtime of the scenario's clock kind.
pub fn run_point(scn: &Scenario, point: u32) -> PointResult {
    let (sensors, queries) = scn.load_at(point);
    let rt = match scn.clock {
        ClockMode::Mock => tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .start_paused(true)
            .build(),
        ClockMode::System => tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build(),
    }
    .expect("tokio runtime");
    let started = std::time::Instant::now();
    let cpu0 = cpu_ms();
    let out = rt.block_on(drive(scn, point));
    drop(rt);
    let wall = started.elapsed();
    let cpu = cpu_ms() - cpu0;
    match out {
        Ok(mut r) => {
            r.wall = wall;
            r.wall_cpu_ms = cpu;
            r
        }
        Err(e) => {
            tracing::error!(point, err = %format!("{e:#}"), "bench point failed");
            PointResult::failed(point, sensors, queries, &e, wall, cpu)
        }
    }
}

pub fn sensor_vsd(scn: &Scenario, i: u32) -> VirtualSensorDefinition {
    let history = 1000.max(2 * scn.interval_ms().div_ceil(scn.sampling_ms));
    vsd_from_json(&json!({
        "name": format!("s{i}"),
        "binding": {
            "plugin_id": "sim",
            "transport": "in_process",
            "config": {
                "kind": "seeded_noise",
                "seed": (scn.seed + u64::from(i)).to_string(),
                "amplitude": "4",
                "offset": "20",
                "type": "temperature"
            }
        },
        "sampling_interval_ms": scn.sampling_ms,
        "window": scn.window,
        "aggregations": scn.aggregations,
        "emit_interval_ms": scn.emit_interval_ms(),
        "history_size": history
    }))
    .expect("bench sensor definitions are valid")
}

struct Servers {
    stop: Vec<oneshot::Sender<()>>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl Servers {
    async fn stop(self) {
        for s in self.stop {
            let _ = s.send(());
        }
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

fn serve(listener: TcpListener, app: axum::Router, servers: &mut Servers) {
    let (tx, rx) = oneshot::channel::<()>();
    servers.stop.push(tx);
    servers.tasks.push(tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    }));
}

async fn fetch_metrics(http: &SharedHttpClient, node_url: &str) -> anyhow::Result<MetricsSnapshot> {
    let r = http.get(&format!("{node_url}/metrics")).await?;
    anyhow::ensure!(r.is_success(), "GET /metrics: status {}", r.status);
    Ok(serde_json::from_slice(&r.body)?)
}

async fn drive(scn: &Scenario, point: u32) -> anyhow::Result<PointResult> {
    let (n_sensors, n_queries) = scn.load_at(point);
    let data = tempfile::tempdir()?;
    let mut servers = Servers {
        stop: Vec::new(),
        tasks: Vec::new(),
    };
    let (clock, http, node_url, registry_url, net, listeners): (
        Clock,
        SharedHttpClient,
        _,
        _,
        _,
        _,
    ) = match scn.clock {
        ClockMode::Mock => {
            let net = RouterClient::new();
            (
                Clock::starting_at(MOCK_EPOCH),
                Arc::new(net.clone()),
                "http://node:8080".to_string(),
                "http://registry:7000".to_string(),
                Some(net),
                None,
            )
        }
        ClockMode::System => {
            let ln = TcpListener::bind("127.0.0.1:0").await?;
            let lr = TcpListener::bind("127.0.0.1:0").await?;
            (
                Clock::system(),
                Arc::new(ReqwestClient::new(Duration::from_secs(5))),
                format!("http://{}", ln.local_addr()?),
                format!("http://{}", lr.local_addr()?),
                None,
                Some((ln, lr)),
            )
        }
    };
    let registry = Registry::open(RegistryOptions {
        clock,
        http: http.clone(),
        data_dir: data.path().to_path_buf(),
        public_url: registry_url.clone(),
        liveness_ms: DEFAULT_LIVENESS_MS,
    })
    .context("opening registry")?;
    let mut opts = NodeOptions::new(NODE_ID, &node_url);
    opts.clock = clock;
    opts.http = http.clone();
    opts.cost_model = scn.cost_model;
    opts.journal = false;
    let node = Node::new(opts);
    let node_app = mosden_node::api::router(node.clone());
    let registry_app = mosden_registry::api::router(registry.clone());
    match (net, listeners) {
        (Some(net), _) => {
            net.mount(&node_url, node_app);
            net.mount(&registry_url, registry_app);
        }
        (None, Some((ln, lr))) => {
            serve(ln, node_app, &mut servers);
            serve(lr, registry_app, &mut servers);
        }
        _ => unreachable!(),
    }

    let result = measure(
        scn,
        point,
        n_sensors,
        n_queries,
        &node,
        &registry,
        &http,
        &node_url,
        &registry_url,
    )
    .await;
    node.shutdown().await;
    servers.stop().await;
    result
}

#[allow(clippy::too_many_arguments)]
async fn measure(
    scn: &Scenario,
    point: u32,
    n_sensors: u32,
    n_queries: u32,
    node: &Arc<Node>,
    registry: &Arc<Registry>,
    http: &SharedHttpClient,
    node_url: &str,
    registry_url: &str,
) -> anyhow::Result<PointResult> {
    let duration_ms = scn.duration_s * 1000;
    let t0 = Instant::now();
    for i in 0..n_sensors {
        node.activate(sensor_vsd(scn, i)).await?;
    }
    node.register_with(registry_url)
        .await
        .map_err(|e| anyhow!("registration: {e}"))?;

    let mut dispatch_failures = 0;
    for q in 0..n_queries {
        let body = json!({
            "id": format!("q{q}"),
            "criteria": {"vs_name": format!("s{}", q % n_sensors)},
            "interval_ms": scn.interval_ms(),
            "duration_ms": duration_ms,
            "payload": scn.payload,
        });
        let r = http
            .post_json(
                &format!("{registry_url}/registry/requests"),
                body.to_string().into_bytes(),
            )
            .await?;
        if r.status != 201 {
            tracing::warn!(query = q, status = r.status, "dispatch failed");
            dispatch_failures += 1;
        }
    }

    let deadline = t0 + Duration::from_millis(duration_ms);
    let mut healthz = LatencyHistogram::new();
    let mut healthz_failures = 0;
    let mut tick = tokio::time::interval(Duration::from_millis(scn.poll_ms));
    let mut k = 0u32;
    loop {
        tick.tick().await;
        if Instant::now() >= deadline {
            break;
        }
        let start = Instant::now();
        let up = matches!(http.get(&format!("{node_url}/healthz")).await, Ok(r) if r.status == 200);
        healthz.record(start.elapsed());
        if !up {
            healthz_failures += 1;
        }
        let _ = http
            .get(&format!(
                "{node_url}/sensors/s{}/data?mode=processed",
                k % n_sensors
            ))
            .await;
        k += 1;
    }
    sleep_until(deadline).await;
    let at_end = fetch_metrics(http, node_url).await?;

    let last_expiry = registry
        .requests()
        .iter()
        .flat_map(|r| r.subscriptions.iter().map(|s| s.expiry))
        .max()
        .unwrap_or_else(|| node.clock().now_ms());
    sleep_until(node.clock().instant_at(last_expiry) + GRACE).await;
    let mut fin = fetch_metrics(http, node_url).await?;
    // samples count over the measured window; traffic includes the tail
    fin.sensors = at_end.sensors;
    let energy = account(&fin, &scn.cost_model);

    let period = scn.interval_ms().max(scn.emit_interval_ms());
    let floor = (duration_ms / period).saturating_sub(1);
    let mut per_request = BTreeMap::new();
    let mut short = 0;
    for r in registry.requests() {
        let n = match registry.results(&r.id) {
            Some(Ok(rows)) => rows.len() as u64,
            _ => 0,
        };
        short += r.subscriptions.iter().filter(|_| n < floor).count() as u64;
        per_request.insert(r.id.clone(), n);
    }
    let stats = registry.stats();
    let deliveries = fin.subscriptions.values().map(|s| s.deliveries).sum();
    let drops = fin.subscriptions.values().map(|s| s.drops).sum();

    let mut r = PointResult {
        point,
        sensors: n_sensors,
        queries: n_queries,
        samples_ok: fin.sensors.values().map(|s| s.samples_ok).sum(),
        messages_sent: fin.messages_sent,
        bytes_sent: fin.bytes_sent,
        l1: fin.l1,
        l2: fin.l2,
        energy,
        wall_cpu_ms: 0.0,
        healthz: healthz.summary(),
        healthz_failures,
        deliveries,
        ingested: stats.ingested,
        drops,
        short_subscriptions: short,
        dispatch_failures,
        per_request,
        wall: Duration::ZERO,
        status: String::new(),
    };
    r.status = status_of(&r);
    Ok(r)
}

fn status_of(r: &PointResult) -> String {
    let mut problems = Vec::new();
    if r.dispatch_failures > 0 {
        problems.push(format!("dispatch_failures={}", r.dispatch_failures));
    }
    if r.losses() > 0 {
        problems.push(format!("losses={}", r.losses()));
    }
    if r.short_subscriptions > 0 {
        problems.push(format!("short_subscriptions={}", r.short_subscriptions));
    }
    if r.healthz_failures > 0 {
        problems.push(format!("healthz_failures={}", r.healthz_failures));
    }
    if problems.is_empty() {
        "ok".into()
    } else {
        problems.join(" ")
    }
}
