//! The generic wrapper: one sampling task per active virtual sensor.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use mosden_core::metrics::{LatencyHistogram, SensorMetrics};
use mosden_core::model::AggregationSchemaError;
use mosden_core::stream::{Journal, JournalError};
use mosden_core::{
    Schema, SensorDescriptor, StreamStore, TimestampMs, VirtualSensorDefinition, WindowResult,
};
use mosden_runtime::Clock;
use parking_lot::{Mutex, RwLock};
use thiserror::Error;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::plugin_host::{HostError, PluginHandle, PluginRegistry, PluginState, Reading};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown virtual sensor {0:?}")]
    UnknownVirtualSensor(String),
    #[error("virtual sensor {0:?} is already active")]
    DuplicateVirtualSensor(String),
    #[error("aggregation field {0:?} is not in the plugin schema")]
    FieldNotInSchema(String),
    #[error("aggregation does not fit the plugin schema: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

/// Ingest counters of one virtual sensor. Counters only grow.
#[derive(Debug, Default)]
pub struct IngestStats {
    samples_ok: AtomicU64,
    samples_dropped: AtomicU64,
    out_of_order: AtomicU64,
    restarts: AtomicU64,
    l1: Mutex<LatencyHistogram>,
}

impl IngestStats {
    pub fn samples_ok(&self) -> u64 {
        self.samples_ok.load(Ordering::Relaxed)
    }

    pub fn samples_dropped(&self) -> u64 {
        self.samples_dropped.load(Ordering::Relaxed)
    }

    pub fn restarts(&self) -> u64 {
        self.restarts.load(Ordering::Relaxed)
    }

    pub fn l1(&self) -> LatencyHistogram {
        self.l1.lock().clone()
    }
}

/// An activated virtual sensor: definition, negotiated schema, history and
/// counters. Survives deactivation so its history stays queryable.
#[derive(Debug)]
pub struct VirtualSensor {
    vsd: VirtualSensorDefinition,
    schema: Schema,
    metadata: BTreeMap<String, String>,
    activated_at: TimestampMs,
    store: RwLock<StreamStore>,
    stats: IngestStats,
    plugin_state: Mutex<PluginState>,
    active: AtomicBool,
    cancel: watch::Sender<bool>,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl VirtualSensor {
    pub fn name(&self) -> &str {
        self.vsd.name()
    }

    pub fn vsd(&self) -> &VirtualSensorDefinition {
        &self.vsd
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn activated_at(&self) -> TimestampMs {
        self.activated_at
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::Acquire)
    }

    pub fn plugin_state(&self) -> PluginState {
        *self.plugin_state.lock()
    }

    /// Read access to the history. Holding the guard blocks the sampler.
    pub fn store(&self) -> parking_lot::RwLockReadGuard<'_, StreamStore> {
        self.store.read()
    }

    pub fn emit(&self, now: TimestampMs) -> WindowResult {
        mosden_core::stream::emit_tick(&self.vsd, &self.store.read(), now)
    }

    pub fn descriptor(&self, node_id: &str) -> SensorDescriptor {
        SensorDescriptor {
            node_id: node_id.to_string(),
            vs_name: self.name().to_string(),
            schema: self.schema.clone(),
            metadata: self.metadata.clone(),
            registered_at: self.activated_at,
        }
    }

    pub fn metrics(&self) -> SensorMetrics {
        SensorMetrics {
            samples_ok: self.stats.samples_ok(),
            samples_dropped: self.stats.samples_dropped(),
            out_of_order: self.stats.out_of_order.load(Ordering::Relaxed),
            plugin_state: self.plugin_state().to_string(),
            restarts: self.stats.restarts(),
            l1: self.stats.l1.lock().summary(),
        }
    }
}

/// Outcome of one sampling tick.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleOutcome {
    Stored,
    Dropped,
    NoData,
    /// The plugin connection is gone; the restart policy takes over.
    Failed(HostError),
}

/// The per-sensor periodic task: owns the plugin handle and is the only
/// writer of the sensor's store.
pub struct SamplingTask {
    sensor: Arc<VirtualSensor>,
    handle: PluginHandle,
    interval: Duration,
    journal: Option<Journal>,
    clock: Clock,
    registry: Arc<RwLock<PluginRegistry>>,
}

impl SamplingTask {
    pub fn sensor(&self) -> &Arc<VirtualSensor> {
        &self.sensor
    }

    pub async fn sample_once(&mut self) -> SampleOutcome {
        let start = Instant::now();
        let now = self.clock.now_ms();
        let outcome = match self.handle.get_readings(now).await {
            Ok(Reading::Element(e)) => {
                let appended = self.sensor.store.write().append(e.clone());
                match appended {
                    Ok(()) => {
                        self.sensor.stats.l1.lock().record(start.elapsed());
                        self.sensor.stats.samples_ok.fetch_add(1, Ordering::Relaxed);
                        if let Some(j) = &mut self.journal {
                            if let Err(err) = j.append(&self.sensor.schema, &e) {
                                tracing::warn!(vs = self.sensor.name(), %err, "journal write failed");
                            }
                        }
                        SampleOutcome::Stored
                    }
                    Err(err) => {
                        tracing::debug!(vs = self.sensor.name(), %err, "reading dropped");
                        self.sensor.stats.out_of_order.fetch_add(1, Ordering::Relaxed);
                        self.sensor.stats.samples_dropped.fetch_add(1, Ordering::Relaxed);
                        SampleOutcome::Dropped
                    }
                }
            }
            Ok(Reading::NoData) => SampleOutcome::NoData,
            Err(err) if err.is_fatal_to_connection() => SampleOutcome::Failed(err),
            Err(err) => {
                tracing::debug!(vs = self.sensor.name(), %err, "reading dropped");
                self.sensor.stats.samples_dropped.fetch_add(1, Ordering::Relaxed);
                SampleOutcome::Dropped
            }
        };
        self.sync_state();
        outcome
    }

    fn sync_state(&self) {
        *self.sensor.plugin_state.lock() = self.handle.state();
    }

    /// Restarts the plugin with backoff. Gives up after `max_restarts`
    /// consecutive failed attempts.
    async fn recover(&mut self, consecutive: &mut u32, cancel: &mut watch::Receiver<bool>) -> bool {
        let cfg = self.registry.read().host_config();
        while *consecutive < cfg.max_restarts {
            *consecutive += 1;
            tokio::select! {
                _ = cancel.changed() => return false,
                _ = tokio::time::sleep(cfg.restart_backoff) => {}
            }
            self.sensor.stats.restarts.fetch_add(1, Ordering::Relaxed);
            let res = self.handle.restart().await;
            self.sync_state();
            match res {
                Ok(()) => {
                    tracing::info!(vs = self.sensor.name(), attempt = *consecutive, "plugin restarted");
                    return true;
                }
                Err(err) => {
                    tracing::warn!(vs = self.sensor.name(), attempt = *consecutive, %err, "plugin restart failed");
                }
            }
        }
        tracing::error!(vs = self.sensor.name(), "plugin failed for good; sampling stopped");
        false
    }

    /// Fixed-rate loop. A tick that overruns its interval is followed
    /// immediately by the next one; missed ticks are skipped, not replayed.
    pub async fn run(mut self, mut cancel: watch::Receiver<bool>) {
        let mut due = Instant::now();
        let mut consecutive_restarts = 0;
        loop {
            tokio::select! {
                biased;
                _ = cancel.changed() => break,
                _ = tokio::time::sleep_until(due) => {}
            }
            match self.sample_once().await {
                SampleOutcome::Failed(err) => {
                    tracing::warn!(vs = self.sensor.name(), %err, "plugin failed");
                    if !self.recover(&mut consecutive_restarts, &mut cancel).await {
                        break;
                    }
                }
                SampleOutcome::Stored => consecutive_restarts = 0,
                _ => {}
            }
            let finished = Instant::now();
            due += self.interval;
            if due < finished {
                due = finished;
            }
        }
        self.handle.stop();
        self.sync_state();
        self.registry
            .write()
            .release(self.handle.binding().plugin_id(), self.clock.now_ms());
    }
}

/// Owns all virtual sensors of a node.
pub struct Engine {
    registry: Arc<RwLock<PluginRegistry>>,
    sensors: RwLock<BTreeMap<String, Arc<VirtualSensor>>>,
    clock: Clock,
    journal_dir: Option<PathBuf>,
}

impl Engine {
    pub fn new(registry: Arc<RwLock<PluginRegistry>>, clock: Clock, journal_dir: Option<PathBuf>) -> Self {
        Self {
            registry,
            sensors: RwLock::new(BTreeMap::new()),
            clock,
            journal_dir,
        }
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn registry(&self) -> &Arc<RwLock<PluginRegistry>> {
        &self.registry
    }

    /// Configures the plugin, negotiates its schema, checks the aggregations
    /// against it and prepares the store, without starting the loop.
    pub async fn prepare(&self, vsd: VirtualSensorDefinition) -> Result<SamplingTask, EngineError> {
        if self.get(vsd.name()).is_some_and(|s| s.is_active()) {
            return Err(EngineError::DuplicateVirtualSensor(vsd.name().to_string()));
        }
        let binding = vsd.binding().clone();
        let (launcher, host_config, manifest) = {
            let reg = self.registry.read();
            (
                reg.launcher_for(&binding)?,
                reg.host_config(),
                reg.manifest(binding.plugin_id()).cloned(),
            )
        };
        let mut handle = PluginHandle::connect(binding.clone(), launcher, host_config).await?;
        handle.set_configuration(binding.config()).await?;
        let schema = handle.get_data_structure().await?;
        vsd.check_schema(&schema).map_err(|e| match e {
            AggregationSchemaError::FieldNotInSchema(f) => EngineError::FieldNotInSchema(f),
            other => EngineError::SchemaMismatch(other.to_string()),
        })?;
        handle.start()?;

        let capacity = usize::try_from(vsd.history_size()).unwrap_or(usize::MAX);
        let mut store = StreamStore::new(vsd.name(), schema.clone(), capacity);
        let journal = match &self.journal_dir {
            Some(dir) => {
                store.restore(Journal::replay(dir, vsd.name(), &schema, capacity)?);
                Some(Journal::open(dir, vsd.name())?)
            }
            None => None,
        };

        let mut metadata = BTreeMap::new();
        metadata.insert("plugin_id".to_string(), binding.plugin_id().to_string());
        metadata.insert("transport".to_string(), binding.transport().to_string());
        let kind = binding
            .config()
            .get("type")
            .cloned()
            .or_else(|| manifest.as_ref().and_then(|m| m.categories.first().cloned()))
            .unwrap_or_else(|| binding.plugin_id().to_string());
        metadata.insert("type".to_string(), kind);
        if let Some(m) = binding.config().get("manufacturer") {
            metadata.insert("manufacturer".to_string(), m.clone());
        }
        if let Some(unit) = schema.fields().iter().find_map(|f| f.unit()) {
            metadata.insert("unit".to_string(), unit.to_string());
        }
        let fields: Vec<&str> = schema.fields().iter().map(|f| f.name()).collect();
        metadata.insert("fields".to_string(), fields.join(","));

        let now = self.clock.now_ms();
        let (cancel, _) = watch::channel(false);
        let sensor = Arc::new(VirtualSensor {
            vsd,
            schema,
            metadata,
            activated_at: now,
            store: RwLock::new(store),
            stats: IngestStats::default(),
            plugin_state: Mutex::new(handle.state()),
            active: AtomicBool::new(true),
            cancel,
            task: Mutex::new(None),
        });
        self.registry.write().acquire(binding.plugin_id(), now);
        Ok(SamplingTask {
            interval: Duration::from_millis(sensor.vsd.sampling_interval_ms()),
            sensor,
            handle,
            journal,
            clock: self.clock,
            registry: self.registry.clone(),
        })
    }

    /// Activates `vsd` and starts sampling at its interval.
    pub async fn activate(&self, vsd: VirtualSensorDefinition) -> Result<Arc<VirtualSensor>, EngineError> {
        let task = self.prepare(vsd).await?;
        let sensor = task.sensor.clone();
        {
            let mut sensors = self.sensors.write();
            if sensors.get(sensor.name()).is_some_and(|s| s.is_active()) {
                // lost a race with a concurrent activation of the same name
                drop(sensors);
                drop(task);
                self.registry
                    .write()
                    .release(sensor.vsd.binding().plugin_id(), self.clock.now_ms());
                return Err(EngineError::DuplicateVirtualSensor(sensor.name().to_string()));
            }
            sensors.insert(sensor.name().to_string(), sensor.clone());
        }
        let rx = sensor.cancel.subscribe();
        *sensor.task.lock() = Some(tokio::spawn(task.run(rx)));
        tracing::info!(vs = sensor.name(), interval_ms = sensor.vsd.sampling_interval_ms(), "virtual sensor active");
        Ok(sensor)
    }

    /// Stops sampling and the plugin. History stays queryable.
    pub async fn deactivate(&self, name: &str) -> Result<(), EngineError> {
        let sensor = self
            .get(name)
            .filter(|s| s.is_active())
            .ok_or_else(|| EngineError::UnknownVirtualSensor(name.to_string()))?;
        sensor.active.store(false, Ordering::Release);
        sensor.cancel.send_replace(true);
        let task = sensor.task.lock().take();
        if let Some(t) = task {
            let _ = t.await;
        }
        tracing::info!(vs = name, "virtual sensor deactivated");
        Ok(())
    }

    /// Any known sensor, active or not.
    pub fn get(&self, name: &str) -> Option<Arc<VirtualSensor>> {
        self.sensors.read().get(name).cloned()
    }

    pub fn active(&self) -> Vec<Arc<VirtualSensor>> {
        self.sensors
            .read()
            .values()
            .filter(|s| s.is_active())
            .cloned()
            .collect()
    }

    pub fn all(&self) -> Vec<Arc<VirtualSensor>> {
        self.sensors.read().values().cloned().collect()
    }

    pub async fn shutdown(&self) {
        for s in self.active() {
            let _ = self.deactivate(s.name()).await;
        }
    }
}
