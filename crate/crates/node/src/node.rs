use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use mosden_core::metrics::{LatencyHistogram, MetricsSnapshot};
use mosden_core::offload::account;
use mosden_core::sim::SimPlugin;
use mosden_core::vsd::VsdError;
use mosden_core::{
    parse_vsd, Aggregation, CostParameters, NodeRegistration, PluginBinding, SensorDescriptor,
    VirtualSensorDefinition, WindowSpec,
};
use mosden_runtime::{Clock, ReqwestClient, SharedHttpClient};
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::config::NodeConfig;
use crate::engine::{Engine, EngineError, VirtualSensor};
use crate::peer::{fetch_remote_schema, peer_config, PeerError, PeerPlugin, PEER_PLUGIN_ID};
use crate::plugin_host::{discover_plugins, HostConfig, InProcessPlugin, PluginRegistry, SimInProcess};
use crate::subscriptions::{DeliveryCounters, SubscriptionManager};

/// Idle-plugin eviction period.
pub const EVICTION_PERIOD: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Peer(#[from] PeerError),
    #[error("invalid virtual sensor definition: {0}")]
    Vsd(String),
}

/// Everything needed to build a node, independent of config files.
pub struct NodeOptions {
    pub node_id: String,
    pub base_url: String,
    pub clock: Clock,
    pub http: SharedHttpClient,
    pub host: HostConfig,
    /// Journals and persisted subscriptions live here when set.
    pub data_dir: Option<PathBuf>,
    /// Journal stored elements under `data_dir`.
    pub journal: bool,
    pub cost_model: CostParameters,
}

impl NodeOptions {
    pub fn new(node_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            base_url: base_url.into(),
            clock: Clock::system(),
            http: Arc::new(ReqwestClient::default()),
            host: HostConfig::default(),
            data_dir: None,
            journal: true,
            cost_model: CostParameters::default(),
        }
    }
}

/// Parameters of a peer-fed virtual sensor.
#[derive(Debug, Clone)]
pub struct PeerSpec {
    pub local_alias: String,
    pub sampling_interval_ms: u64,
    pub window: WindowSpec,
    pub aggregations: Vec<Aggregation>,
    pub emit_interval_ms: u64,
    pub history_size: u64,
}

pub struct Node {
    node_id: String,
    base_url: String,
    clock: Clock,
    http: SharedHttpClient,
    cost_model: CostParameters,
    registry: Arc<RwLock<PluginRegistry>>,
    engine: Arc<Engine>,
    subscriptions: Arc<SubscriptionManager>,
    counters: Arc<DeliveryCounters>,
    l2: Mutex<LatencyHistogram>,
}

impl Node {
    /// Builds a node with the built-in `sim` and `peer` plugins registered.
    pub fn new(opts: NodeOptions) -> Arc<Self> {
        let clock = opts.clock;
        let mut registry = PluginRegistry::new(opts.host);
        registry.register_in_process(
            mosden_core::sim::SIM_PLUGIN_ID,
            Arc::new(move || {
                Box::new(SimInProcess(SimPlugin::with_clock(Box::new(move || clock.now_ms()))))
                    as Box<dyn InProcessPlugin>
            }),
        );
        let http = opts.http.clone();
        registry.register_in_process(
            PEER_PLUGIN_ID,
            Arc::new(move || Box::new(PeerPlugin::new(http.clone())) as Box<dyn InProcessPlugin>),
        );
        let registry = Arc::new(RwLock::new(registry));
        let journal_dir = opts.data_dir.clone().filter(|_| opts.journal);
        let engine = Arc::new(Engine::new(registry.clone(), clock, journal_dir));
        let counters = Arc::new(DeliveryCounters::default());
        let subscriptions = SubscriptionManager::new(
            engine.clone(),
            opts.http.clone(),
            counters.clone(),
            opts.data_dir.clone(),
        );
        Arc::new(Self {
            node_id: opts.node_id,
            base_url: opts.base_url.trim_end_matches('/').to_string(),
            clock,
            http: opts.http,
            cost_model: opts.cost_model,
            registry,
            engine,
            subscriptions,
            counters,
            l2: Mutex::new(LatencyHistogram::new()),
        })
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn subscriptions(&self) -> &Arc<SubscriptionManager> {
        &self.subscriptions
    }

    pub fn plugins(&self) -> &Arc<RwLock<PluginRegistry>> {
        &self.registry
    }

    pub fn record_l2(&self, d: Duration) {
        self.l2.lock().record(d);
    }

    /// Activates a virtual sensor. Peer bindings are checked against the
    /// remote first so an unreachable peer creates nothing.
    pub async fn activate(&self, vsd: VirtualSensorDefinition) -> Result<Arc<VirtualSensor>, NodeError> {
        if vsd.binding().plugin_id() == PEER_PLUGIN_ID {
            let cfg = vsd.binding().config();
            if let (Some(remote), Some(vs)) = (cfg.get("remote"), cfg.get("vs_name")) {
                fetch_remote_schema(&self.http, remote, vs).await?;
            }
        }
        Ok(self.engine.activate(vsd).await?)
    }

    /// Stops a virtual sensor and cancels its subscriptions with a notice.
    pub async fn deactivate(&self, name: &str) -> Result<(), NodeError> {
        self.engine.deactivate(name).await?;
        self.subscriptions
            .cancel_for_sensor(name, "virtual sensor deactivated")
            .await;
        Ok(())
    }

    /// Creates a local virtual sensor fed by `remote_vs` on node `remote`.
    pub async fn peer_stream(
        &self,
        remote: &str,
        remote_vs: &str,
        spec: PeerSpec,
    ) -> Result<Arc<VirtualSensor>, NodeError> {
        let binding = PluginBinding::in_process(PEER_PLUGIN_ID, peer_config(remote, remote_vs));
        let vsd = VirtualSensorDefinition::new(
            spec.local_alias,
            binding,
            spec.sampling_interval_ms,
            spec.window,
            spec.aggregations,
            spec.emit_interval_ms,
            spec.history_size,
            Some(format!("peer of {remote_vs} at {remote}")),
        )
        .map_err(|e| NodeError::Vsd(e.to_string()))?;
        self.activate(vsd).await
    }

    pub fn descriptors(&self) -> Vec<SensorDescriptor> {
        self.engine
            .active()
            .iter()
            .map(|s| s.descriptor(&self.node_id))
            .collect()
    }

    pub fn registration(&self) -> NodeRegistration {
        NodeRegistration {
            node_id: self.node_id.clone(),
            base_url: self.base_url.clone(),
            descriptors: self.descriptors(),
        }
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let mut l1 = LatencyHistogram::new();
        for s in self.engine.all() {
            l1.merge(&s.stats().l1());
        }
        let mut snap = MetricsSnapshot {
            node_id: self.node_id.clone(),
            sensors: self
                .engine
                .all()
                .iter()
                .map(|s| (s.name().to_string(), s.metrics()))
                .collect(),
            subscriptions: self.subscriptions.metrics(),
            l1: l1.summary(),
            l2: self.l2.lock().summary(),
            bytes_sent: self.counters.bytes_sent.load(Ordering::Relaxed),
            messages_sent: self.counters.messages_sent.load(Ordering::Relaxed),
            energy: None,
        };
        snap.energy = Some(account(&snap, &self.cost_model));
        snap
    }

    /// Posts this node's descriptors to the registry once.
    pub async fn register_with(&self, registry_url: &str) -> Result<(), String> {
        let url = format!("{}/registry/sensors", registry_url.trim_end_matches('/'));
        let body = serde_json::to_vec(&self.registration()).expect("registration serializes");
        match self.http.post_json(&url, body).await {
            Ok(r) if r.is_success() => Ok(()),
            Ok(r) => Err(format!("{url}: status {}", r.status)),
            Err(e) => Err(e.to_string()),
        }
    }

    /// Registers now and then every `period` (the registry's liveness
    /// signal).
    pub fn spawn_heartbeat(self: &Arc<Self>, registry_url: String, period: Duration) -> tokio::task::JoinHandle<()> {
        let node = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                if let Err(err) = node.register_with(&registry_url).await {
                    tracing::warn!(registry = %registry_url, %err, "registration failed");
                }
            }
        })
    }

    pub async fn shutdown(&self) {
        self.subscriptions.shutdown().await;
        self.engine.shutdown().await;
    }
}

/// Reads every `*.json` VSD in `dir`, in file-name order.
pub fn load_vsds(dir: &Path) -> std::io::Result<Vec<(PathBuf, Result<VirtualSensorDefinition, VsdError>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p)?;
            Ok((p, parse_vsd(&bytes)))
        })
        .collect()
}

/// Builds a node from its config: discovers plugins, activates the VSDs
/// found in `vsd_dir` and restores persisted subscriptions. Per-VSD
/// failures are logged and skipped.
pub async fn start_node(cfg: &NodeConfig, http: SharedHttpClient, clock: Clock) -> anyhow::Result<Arc<Node>> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    let node = Node::new(NodeOptions {
        node_id: cfg.node_id.clone(),
        base_url: cfg.base_url(),
        clock,
        http,
        host: HostConfig::default(),
        data_dir: Some(cfg.data_dir.clone()),
        journal: cfg.journal_enabled(),
        cost_model: cfg.cost_model,
    });
    let discovery = discover_plugins(&cfg.plugin_dir)?;
    for w in &discovery.warnings {
        tracing::warn!(%w, "skipped plugin");
    }
    {
        let mut reg = node.plugins().write();
        for p in discovery.plugins {
            tracing::info!(plugin = %p.manifest.plugin_id, version = %p.manifest.version, "plugin installed");
            reg.install(p);
        }
    }
    for (path, vsd) in load_vsds(&cfg.vsd_dir)? {
        let vsd = match vsd {
            Ok(v) => v,
            Err(err) => {
                tracing::error!(path = %path.display(), %err, "invalid virtual sensor definition");
                continue;
            }
        };
        let name = vsd.name().to_string();
        if let Err(err) = node.activate(vsd).await {
            tracing::error!(vs = %name, path = %path.display(), %err, "activation failed");
        }
    }
    if let Some(budget) = cfg.plugin_budget_bytes {
        node.plugins().write().evict_unused(budget);
    }
    let resumed = node.subscriptions().restore();
    if resumed > 0 {
        tracing::info!(resumed, "subscriptions restored");
    }
    Ok(node)
}

/// Runs a node until ctrl-c.
pub async fn run_node(cfg: NodeConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    let mut cfg = cfg;
    if cfg.public_url.is_none() {
        cfg.public_url = Some(format!("http://{}", listener.local_addr()?));
    }
    let node = start_node(&cfg, Arc::new(ReqwestClient::default()), Clock::system()).await?;
    if let Some(url) = &cfg.registry_url {
        node.spawn_heartbeat(url.clone(), Duration::from_millis(cfg.heartbeat_ms));
    }
    if let Some(budget) = cfg.plugin_budget_bytes {
        let n = node.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(EVICTION_PERIOD);
            loop {
                tick.tick().await;
                n.plugins().write().evict_unused(budget);
            }
        });
    }
    tracing::info!(node = %node.node_id(), addr = %listener.local_addr()?, "node listening");
    axum::serve(listener, crate::api::router(node.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    node.shutdown().await;
    Ok(())
}
