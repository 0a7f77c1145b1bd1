//! Push subscriptions: registration, per-subscription delivery loops,
//! bounded retry and persistence across restarts.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use mosden_core::element::element_to_json;
use mosden_core::metrics::SubscriptionMetrics;
use mosden_core::model::{AggregationSchemaError, ModelError};
use mosden_core::{
    PayloadKind, Subscription, SubscriptionMode, SubscriptionRequest, TimestampMs,
};
use mosden_runtime::{Clock, SharedHttpClient};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::engine::{Engine, VirtualSensor};

pub const SUBSCRIPTIONS_FILE: &str = "subscriptions.json";

/// Waits before the 1st, 2nd and 3rd retry of a failed delivery.
pub const RETRY_BACKOFF_MS: [u64; 3] = [250, 500, 1000];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubscriptionError {
    #[error("unknown virtual sensor {0:?}")]
    UnknownVirtualSensor(String),
    #[error("expiry {expiry} is not after now ({now})")]
    ExpiredOnArrival { expiry: TimestampMs, now: TimestampMs },
    #[error("bad delivery endpoint: {0}")]
    BadEndpoint(String),
    #[error("unknown subscription {0:?}")]
    UnknownSubscription(String),
    #[error("field {0:?} is not in the sensor schema")]
    FieldNotInSchema(String),
    #[error("invalid subscription: {0}")]
    Invalid(String),
}

impl SubscriptionError {
    pub fn code(&self) -> &'static str {
        match self {
            SubscriptionError::UnknownVirtualSensor(_) => "UnknownVirtualSensor",
            SubscriptionError::ExpiredOnArrival { .. } => "ExpiredOnArrival",
            SubscriptionError::BadEndpoint(_) => "BadEndpoint",
            SubscriptionError::UnknownSubscription(_) => "UnknownSubscription",
            SubscriptionError::FieldNotInSchema(_) => "FieldNotInSchema",
            SubscriptionError::Invalid(_) => "InvalidSubscription",
        }
    }
}

/// Global transmission counters shared with `/metrics`.
#[derive(Debug, Default)]
pub struct DeliveryCounters {
    pub messages_sent: AtomicU64,
    pub bytes_sent: AtomicU64,
}

#[derive(Debug, Default)]
struct SubStats {
    deliveries: AtomicU64,
    retries: AtomicU64,
    drops: AtomicU64,
    bytes_sent: AtomicU64,
}

struct Entry {
    sub: Subscription,
    stats: SubStats,
    next_seq: AtomicU64,
    active: AtomicBool,
    cancel: watch::Sender<bool>,
    task: Mutex<Option<JoinHandle<()>>>,
}

#[derive(Serialize, Deserialize)]
struct Persisted {
    next_id: u64,
    subscriptions: Vec<PersistedSub>,
}

#[derive(Serialize, Deserialize)]
struct PersistedSub {
    #[serde(flatten)]
    sub: Subscription,
    next_seq: u64,
}

#[derive(Default)]
struct State {
    entries: BTreeMap<String, Arc<Entry>>,
    next_id: u64,
}

/// Result of one push attempt sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Ok,
    Retried,
    Dropped,
}

pub struct SubscriptionManager {
    state: Mutex<State>,
    engine: Arc<Engine>,
    http: SharedHttpClient,
    clock: Clock,
    counters: Arc<DeliveryCounters>,
    persist_path: Option<PathBuf>,
}

impl SubscriptionManager {
    pub fn new(
        engine: Arc<Engine>,
        http: SharedHttpClient,
        counters: Arc<DeliveryCounters>,
        data_dir: Option<PathBuf>,
    ) -> Arc<Self> {
        let clock = engine.clock();
        Arc::new(Self {
            state: Mutex::new(State::default()),
            engine,
            http,
            clock,
            counters,
            persist_path: data_dir.map(|d| d.join(SUBSCRIPTIONS_FILE)),
        })
    }

    /// Validates and registers a subscription, starting its delivery loop
    /// for push mode.
    pub fn create(self: &Arc<Self>, req: SubscriptionRequest) -> Result<Subscription, SubscriptionError> {
        let now = self.clock.now_ms();
        let sensor = self
            .engine
            .get(&req.vs_name)
            .filter(|s| s.is_active())
            .ok_or_else(|| SubscriptionError::UnknownVirtualSensor(req.vs_name.clone()))?;
        if req.expiry <= now {
            return Err(SubscriptionError::ExpiredOnArrival {
                expiry: req.expiry,
                now,
            });
        }
        if req.mode == SubscriptionMode::Push {
            check_endpoint(req.delivery_endpoint.as_deref())?;
        }
        if let Some(aggs) = &req.aggregations {
            if aggs.is_empty() {
                return Err(SubscriptionError::Invalid("aggregations must not be empty".into()));
            }
            for a in aggs {
                a.check_against(sensor.schema()).map_err(|e| match e {
                    AggregationSchemaError::FieldNotInSchema(f) => SubscriptionError::FieldNotInSchema(f),
                    other => SubscriptionError::Invalid(other.to_string()),
                })?;
            }
        }
        let start_seq = sensor.store().total_appended();
        let sub = {
            let mut st = self.state.lock();
            st.next_id += 1;
            let id = format!("sub-{}", st.next_id);
            Subscription::new(id, req, now).map_err(|e| match e {
                ModelError::MissingEndpoint => SubscriptionError::BadEndpoint("missing".into()),
                ModelError::ExpiryNotInFuture { expiry, .. } => {
                    SubscriptionError::ExpiredOnArrival { expiry, now }
                }
                ModelError::BadIdentifier(n) => SubscriptionError::UnknownVirtualSensor(n),
                other => SubscriptionError::Invalid(other.to_string()),
            })?
        };
        self.start(sub.clone(), 0, start_seq);
        self.persist();
        tracing::info!(id = sub.id(), vs = sub.vs_name(), expiry = sub.expiry(), "subscription created");
        Ok(sub)
    }

    fn start(self: &Arc<Self>, sub: Subscription, next_seq: u64, raw_seq: u64) {
        let (cancel, rx) = watch::channel(false);
        let entry = Arc::new(Entry {
            sub,
            stats: SubStats::default(),
            next_seq: AtomicU64::new(next_seq),
            active: AtomicBool::new(true),
            cancel,
            task: Mutex::new(None),
        });
        self.state
            .lock()
            .entries
            .insert(entry.sub.id().to_string(), entry.clone());
        let me = self.clone();
        let e = entry.clone();
        let task = tokio::spawn(async move { me.run(e, rx, raw_seq).await });
        *entry.task.lock() = Some(task);
    }

    /// Active subscriptions in id order.
    pub fn list(&self) -> Vec<Subscription> {
        let mut subs: Vec<_> = self
            .state
            .lock()
            .entries
            .values()
            .filter(|e| e.active.load(Ordering::Acquire))
            .map(|e| e.sub.clone())
            .collect();
        subs.sort_by_key(|s| id_number(s.id()));
        subs
    }

    pub fn get(&self, id: &str) -> Option<Subscription> {
        let st = self.state.lock();
        st.entries
            .get(id)
            .filter(|e| e.active.load(Ordering::Acquire))
            .map(|e| e.sub.clone())
    }

    /// Consumer-initiated removal; no notice is sent.
    pub async fn delete(&self, id: &str) -> Result<(), SubscriptionError> {
        let entry = self
            .state
            .lock()
            .entries
            .get(id)
            .filter(|e| e.active.load(Ordering::Acquire))
            .cloned()
            .ok_or_else(|| SubscriptionError::UnknownSubscription(id.to_string()))?;
        self.stop_entry(&entry).await;
        self.persist();
        Ok(())
    }

    async fn stop_entry(&self, entry: &Entry) {
        entry.active.store(false, Ordering::Release);
        entry.cancel.send_replace(true);
        let task = entry.task.lock().take();
        if let Some(t) = task {
            // the loop may be the caller (expiry path) only via finish(), never here
            let _ = t.await;
        }
    }

    /// Cancels every subscription on `vs_name`, sending each push endpoint a
    /// final cancellation notice.
    pub async fn cancel_for_sensor(&self, vs_name: &str, reason: &str) -> usize {
        let entries: Vec<Arc<Entry>> = self
            .state
            .lock()
            .entries
            .values()
            .filter(|e| e.active.load(Ordering::Acquire) && e.sub.vs_name() == vs_name)
            .cloned()
            .collect();
        for e in &entries {
            self.stop_entry(e).await;
            if let Some(endpoint) = e.sub.delivery_endpoint() {
                let payload = json!({"kind": "cancelled", "vs_name": vs_name, "reason": reason});
                let seq = e.next_seq.fetch_add(1, Ordering::AcqRel);
                let body = wire_body(e.sub.id(), seq, self.clock.now_ms(), payload);
                match self.http.post_json(endpoint, body.clone()).await {
                    Ok(r) if r.is_success() => self.count_sent(e, body.len()),
                    Ok(r) => tracing::warn!(id = e.sub.id(), status = r.status, "cancellation notice rejected"),
                    Err(err) => tracing::warn!(id = e.sub.id(), %err, "cancellation notice not delivered"),
                }
            }
        }
        if !entries.is_empty() {
            self.persist();
        }
        entries.len()
    }

    /// Stops all loops, keeping the persisted state for the next start.
    pub async fn shutdown(&self) {
        self.persist();
        let entries: Vec<Arc<Entry>> = self.state.lock().entries.values().cloned().collect();
        for e in entries {
            e.cancel.send_replace(true);
            let task = e.task.lock().take();
            if let Some(t) = task {
                let _ = t.await;
            }
        }
    }

    pub fn metrics(&self) -> BTreeMap<String, SubscriptionMetrics> {
        self.state
            .lock()
            .entries
            .iter()
            .map(|(id, e)| {
                (
                    id.clone(),
                    SubscriptionMetrics {
                        vs_name: e.sub.vs_name().to_string(),
                        deliveries: e.stats.deliveries.load(Ordering::Relaxed),
                        retries: e.stats.retries.load(Ordering::Relaxed),
                        drops: e.stats.drops.load(Ordering::Relaxed),
                        bytes_sent: e.stats.bytes_sent.load(Ordering::Relaxed),
                        active: e.active.load(Ordering::Acquire),
                    },
                )
            })
            .collect()
    }

    fn persist(&self) {
        let Some(path) = &self.persist_path else {
            return;
        };
        let doc = {
            let st = self.state.lock();
            Persisted {
                next_id: st.next_id,
                subscriptions: st
                    .entries
                    .values()
                    .filter(|e| e.active.load(Ordering::Acquire))
                    .map(|e| PersistedSub {
                        sub: e.sub.clone(),
                        next_seq: e.next_seq.load(Ordering::Acquire),
                    })
                    .collect(),
            }
        };
        let bytes = serde_json::to_vec_pretty(&doc).expect("subscriptions serialize");
        let tmp = path.with_extension("json.tmp");
        let res = std::fs::write(&tmp, bytes).and_then(|()| std::fs::rename(&tmp, path));
        if let Err(err) = res {
            tracing::warn!(path = %path.display(), %err, "cannot persist subscriptions");
        }
    }

    /// Reloads persisted subscriptions, dropping expired ones and those whose
    /// sensor is not active. Returns the number resumed.
    pub fn restore(self: &Arc<Self>) -> usize {
        let Some(path) = &self.persist_path else {
            return 0;
        };
        let doc: Persisted = match std::fs::read(path) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(d) => d,
                Err(err) => {
                    tracing::warn!(path = %path.display(), %err, "ignoring unreadable subscriptions file");
                    return 0;
                }
            },
            Err(_) => return 0,
        };
        let now = self.clock.now_ms();
        {
            let mut st = self.state.lock();
            st.next_id = st.next_id.max(doc.next_id);
        }
        let mut resumed = 0;
        for p in doc.subscriptions {
            if p.sub.expiry() <= now {
                continue;
            }
            let Some(sensor) = self.engine.get(p.sub.vs_name()).filter(|s| s.is_active()) else {
                tracing::warn!(id = p.sub.id(), vs = p.sub.vs_name(), "dropping subscription on inactive sensor");
                continue;
            };
            let raw_seq = sensor.store().total_appended();
            self.start(p.sub, p.next_seq, raw_seq);
            resumed += 1;
        }
        self.persist();
        resumed
    }

    fn count_sent(&self, e: &Entry, bytes: usize) {
        e.stats.deliveries.fetch_add(1, Ordering::Relaxed);
        e.stats.bytes_sent.fetch_add(bytes as u64, Ordering::Relaxed);
        self.counters.messages_sent.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_sent.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    async fn run(self: Arc<Self>, entry: Arc<Entry>, mut cancel: watch::Receiver<bool>, mut raw_seq: u64) {
        if entry.sub.mode() == SubscriptionMode::Push {
            let Some(sensor) = self.engine.get(entry.sub.vs_name()) else {
                return;
            };
            let period = entry.sub.interval_ms().max(sensor.vsd().emit_interval_ms()) as i64;
            let created = entry.sub.created_at();
            let expiry = entry.sub.expiry();
            let mut k: i64 = (self.clock.now_ms() - created) / period + 1;
            loop {
                let due = created + k * period;
                if due > expiry {
                    break;
                }
                tokio::select! {
                    biased;
                    _ = cancel.changed() => return,
                    _ = self.clock.sleep_until_ms(due) => {}
                }
                let now = self.clock.now_ms();
                if now > expiry {
                    break;
                }
                if let Some(payload) = self.payload(&entry, &sensor, now, &mut raw_seq) {
                    tokio::select! {
                        biased;
                        _ = cancel.changed() => return,
                        _ = self.deliver(&entry, payload) => {}
                    }
                }
                // skip ticks that passed while delivering
                k = (k + 1).max((self.clock.now_ms() - created) / period + 1);
            }
        } else {
            tokio::select! {
                _ = cancel.changed() => return,
                _ = self.clock.sleep_until_ms(entry.sub.expiry()) => {}
            }
        }
        entry.active.store(false, Ordering::Release);
        tracing::info!(id = entry.sub.id(), "subscription expired");
        self.persist();
    }

    fn payload(&self, entry: &Entry, sensor: &VirtualSensor, now: TimestampMs, raw_seq: &mut u64) -> Option<Json> {
        let req = entry.sub.request();
        match entry.sub.payload() {
            PayloadKind::Processed => {
                let window = req.window.unwrap_or_else(|| sensor.vsd().window());
                let aggs = req
                    .aggregations
                    .as_deref()
                    .unwrap_or_else(|| sensor.vsd().aggregations());
                let r = sensor.store().evaluate_window(window, aggs, now);
                let mut j = r.to_json();
                j.as_object_mut()
                    .expect("window results are objects")
                    .shift_insert(0, "kind".into(), "processed".into());
                Some(j)
            }
            PayloadKind::Raw => {
                let (elements, lost, total) = {
                    let store = sensor.store();
                    let (els, lost) = store.since_seq(*raw_seq);
                    (els, lost, store.total_appended())
                };
                if elements.is_empty() && lost == 0 {
                    return None;
                }
                *raw_seq = total;
                let schema = sensor.schema();
                let elements: Vec<Json> = elements
                    .iter()
                    .map(|e| element_to_json(schema, e).expect("stored elements match the schema"))
                    .collect();
                Some(json!({
                    "kind": "raw",
                    "vs_name": sensor.name(),
                    "elements": elements,
                    "lost": lost,
                }))
            }
        }
    }

    /// Sends one payload with up to three retries. The sequence number is
    /// consumed whatever the outcome; no attempt starts after expiry.
    async fn deliver(&self, entry: &Entry, payload: Json) -> DeliveryOutcome {
        let endpoint = entry.sub.delivery_endpoint().expect("push subscriptions have endpoints");
        let seq = entry.next_seq.fetch_add(1, Ordering::AcqRel);
        let body = wire_body(entry.sub.id(), seq, self.clock.now_ms(), payload);
        let mut attempt = 0;
        loop {
            let ok = match self.http.post_json(endpoint, body.clone()).await {
                Ok(r) if r.is_success() => true,
                Ok(r) => {
                    tracing::debug!(id = entry.sub.id(), seq, status = r.status, "delivery rejected");
                    false
                }
                Err(err) => {
                    tracing::debug!(id = entry.sub.id(), seq, %err, "delivery failed");
                    false
                }
            };
            if ok {
                self.count_sent(entry, body.len());
                return if attempt == 0 {
                    DeliveryOutcome::Ok
                } else {
                    DeliveryOutcome::Retried
                };
            }
            let Some(wait) = RETRY_BACKOFF_MS.get(attempt) else {
                break;
            };
            if self.clock.now_ms() + *wait as i64 > entry.sub.expiry() {
                break;
            }
            tokio::time::sleep(Duration::from_millis(*wait)).await;
            attempt += 1;
            entry.stats.retries.fetch_add(1, Ordering::Relaxed);
        }
        entry.stats.drops.fetch_add(1, Ordering::Relaxed);
        tracing::warn!(id = entry.sub.id(), seq, "delivery dropped after retries");
        DeliveryOutcome::Dropped
    }
}

/// Canonical delivery body:
/// `{"subscription_id","sequence_no","sent_at","payload"}` in that order.
pub fn wire_body(id: &str, seq: u64, sent_at: TimestampMs, payload: Json) -> Vec<u8> {
    let body = json!({
        "subscription_id": id,
        "sequence_no": seq,
        "sent_at": sent_at,
        "payload": payload,
    });
    serde_json::to_vec(&body).expect("JSON values always serialize")
}

fn check_endpoint(endpoint: Option<&str>) -> Result<(), SubscriptionError> {
    let raw = endpoint.ok_or_else(|| SubscriptionError::BadEndpoint("missing".into()))?;
    let url = url::Url::parse(raw).map_err(|e| SubscriptionError::BadEndpoint(format!("{raw}: {e}")))?;
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
        return Err(SubscriptionError::BadEndpoint(format!(
            "{raw}: expected an http(s) URL with a host"
        )));
    }
    Ok(())
}

fn id_number(id: &str) -> u64 {
    id.strip_prefix("sub-")
        .and_then(|n| n.parse().ok())
        .unwrap_or(u64::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert!(check_endpoint(Some("http://127.0.0.1:9000/registry/ingest")).is_ok());
        assert!(check_endpoint(Some("https://cloud.example/ingest")).is_ok());
        for bad in ["", "not a url", "ftp://x/y", "mailto:a@b"] {
            assert!(
                matches!(check_endpoint(Some(bad)), Err(SubscriptionError::BadEndpoint(_))),
                "{bad}"
            );
        }
        assert!(check_endpoint(None).is_err());
    }

    #[test]
    fn wire_body_key_order() {
        let b = wire_body("sub-1", 4, 99, json!({"kind": "raw"}));
        assert_eq!(
            std::str::from_utf8(&b).unwrap(),
            r#"{"subscription_id":"sub-1","sequence_no":4,"sent_at":99,"payload":{"kind":"raw"}}"#
        );
    }

    #[test]
    fn ids_sort_numerically() {
        let mut ids = vec!["sub-10", "sub-2", "sub-1"];
        ids.sort_by_key(|s| id_number(s));
        assert_eq!(ids, ["sub-1", "sub-2", "sub-10"]);
    }
}
