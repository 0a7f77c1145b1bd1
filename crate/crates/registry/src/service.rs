use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use mosden_core::{
    Aggregation, NodeRegistration, PayloadKind, SubscriptionMode, SubscriptionRequest, TimestampMs,
    WindowSpec,
};
use mosden_runtime::{Clock, SharedHttpClient};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::table::{Criteria, InvalidRegistration, RecordTable, RegistryRecord};

pub const SNAPSHOT_FILE: &str = "registry.json";
pub const QUARANTINE_FILE: &str = "quarantine.jsonl";
pub const RESULTS_DIR: &str = "results";
pub const DEFAULT_LIVENESS_MS: i64 = 30_000;

/// A user's request for data, matched against the registry and turned
/// into one push subscription per matching sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRequest {
    /// Idempotency key; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub criteria: Criteria,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregations: Option<Vec<Aggregation>>,
    pub interval_ms: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub payload: PayloadKind,
}

impl UserRequest {
    fn check(&self) -> Result<(), String> {
        if self.duration_ms == 0 {
            return Err("duration_ms must be positive".into());
        }
        if self.interval_ms == 0 {
            return Err("interval_ms must be positive".into());
        }
        if let Some(id) = &self.id {
            let ok = !id.is_empty()
                && !id.starts_with('.')
                && id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok {
                return Err(format!("request id {id:?} must be [A-Za-z0-9._-]+"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchedSubscription {
    pub node_id: String,
    pub vs_name: String,
    pub subscription_id: String,
    pub expiry: TimestampMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchFailure {
    pub node_id: String,
    pub vs_name: String,
    pub error: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: String,
    pub request: UserRequest,
    pub created_at: TimestampMs,
    pub subscriptions: Vec<DispatchedSubscription>,
    /// Failures of the most recent dispatch attempt.
    pub failures: Vec<DispatchFailure>,
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no live sensor matches {0:?}")]
    NoMatch(Criteria),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed delivery: {0}")]
    Malformed(String),
    #[error("cannot store delivery: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestOutcome {
    Stored,
    Duplicate,
    Quarantined,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegistryStats {
    pub records: usize,
    pub live_records: usize,
    pub requests: usize,
    pub ingested: u64,
    pub duplicates: u64,
    pub quarantined: u64,
}

/// Wire body of one delivery, as posted by a node.
#[derive(Debug, Deserialize)]
struct Delivery {
    subscription_id: String,
    sequence_no: u64,
    sent_at: TimestampMs,
    payload: Json,
}

#[derive(Serialize, Deserialize, Default)]
struct Snapshot {
    records: RecordTable,
    requests: Vec<RequestRecord>,
    next_request: u64,
}

pub struct RegistryOptions {
    pub clock: Clock,
    pub http: SharedHttpClient,
    pub data_dir: PathBuf,
    /// How nodes reach this registry; delivery endpoints are built from it.
    pub public_url: String,
    pub liveness_ms: i64,
}

/// (node id, subscription id) → (request id, vs name)
type Routes = HashMap<(String, String), (String, String)>;

pub struct Registry {
    clock: Clock,
    http: SharedHttpClient,
    data_dir: PathBuf,
    public_url: String,
    liveness_ms: i64,
    table: RwLock<RecordTable>,
    requests: RwLock<BTreeMap<String, RequestRecord>>,
    routes: RwLock<Routes>,
    next_request: AtomicU64,
    seen: Mutex<HashSet<(String, String, u64)>>,
    logs: Mutex<HashMap<String, Arc<Mutex<File>>>>,
    quarantine: Mutex<()>,
    snapshot_lock: Mutex<()>,
    ingested: AtomicU64,
    duplicates: AtomicU64,
    quarantined: AtomicU64,
}

impl Registry {
    /// Opens (or creates) the registry state under `data_dir`, restoring
    /// the snapshot and the dedupe set from earlier result logs.
    pub fn open(opts: RegistryOptions) -> io::Result<Arc<Self>> {
        fs::create_dir_all(opts.data_dir.join(RESULTS_DIR))?;
        let snap: Snapshot = match fs::read(opts.data_dir.join(SNAPSHOT_FILE)) {
            Ok(b) => serde_json::from_slice(&b)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Snapshot::default(),
            Err(e) => return Err(e),
        };
        let mut routes = Routes::new();
        for r in &snap.requests {
            for s in &r.subscriptions {
                routes.insert(
                    (s.node_id.clone(), s.subscription_id.clone()),
                    (r.id.clone(), s.vs_name.clone()),
                );
            }
        }
        let mut seen = HashSet::new();
        for entry in fs::read_dir(opts.data_dir.join(RESULTS_DIR))? {
            let path = entry?.path();
            if path.extension().is_some_and(|x| x == "jsonl") {
                for row in read_jsonl(&path)? {
                    if let (Some(n), Some(s), Some(q)) = (
                        row["node_id"].as_str(),
                        row["subscription_id"].as_str(),
                        row["sequence_no"].as_u64(),
                    ) {
                        seen.insert((n.to_string(), s.to_string(), q));
                    }
                }
            }
        }
        let quarantined = match read_jsonl(&opts.data_dir.join(QUARANTINE_FILE)) {
            Ok(rows) => rows.len() as u64,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        Ok(Arc::new(Self {
            clock: opts.clock,
            http: opts.http,
            data_dir: opts.data_dir,
            public_url: opts.public_url.trim_end_matches('/').to_string(),
            liveness_ms: opts.liveness_ms,
            table: RwLock::new(snap.records),
            requests: RwLock::new(
                snap.requests
                    .into_iter()
                    .map(|r| (r.id.clone(), r))
                    .collect(),
            ),
            routes: RwLock::new(routes),
            next_request: AtomicU64::new(snap.next_request),
            ingested: AtomicU64::new(seen.len() as u64),
            seen: Mutex::new(seen),
            logs: Mutex::new(HashMap::new()),
            quarantine: Mutex::new(()),
            snapshot_lock: Mutex::new(()),
            duplicates: AtomicU64::new(0),
            quarantined: AtomicU64::new(quarantined),
        }))
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn public_url(&self) -> &str {
        &self.public_url
    }

    pub fn register(&self, reg: &NodeRegistration) -> Result<usize, InvalidRegistration> {
        let n = self.table.write().upsert(reg, self.clock.now_ms())?;
        if n > 0 {
            self.persist();
        }
        Ok(n)
    }

    pub fn records(&self) -> Vec<RegistryRecord> {
        self.table.read().records().cloned().collect()
    }

    pub fn matching(&self, criteria: &Criteria) -> Vec<RegistryRecord> {
        self.table
            .read()
            .matching(criteria, self.clock.now_ms(), self.liveness_ms)
    }

    pub fn request(&self, id: &str) -> Option<RequestRecord> {
        self.requests.read().get(id).cloned()
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.requests.read().values().cloned().collect()
    }

    pub fn stats(&self) -> RegistryStats {
        let now = self.clock.now_ms();
        let table = self.table.read();
        RegistryStats {
            records: table.len(),
            live_records: table
                .records()
                .filter(|r| r.is_live(now, self.liveness_ms))
                .count(),
            requests: self.requests.read().len(),
            ingested: self.ingested.load(Ordering::Relaxed),
            duplicates: self.duplicates.load(Ordering::Relaxed),
            quarantined: self.quarantined.load(Ordering::Relaxed),
        }
    }

    fn ingest_endpoint(&self, node_id: &str) -> String {
        let base = format!("{}/registry/ingest", self.public_url);
        url::Url::parse_with_params(&base, [("node", node_id)])
            .map(String::from)
            .unwrap_or(base)
    }

    /// Matches `req` and subscribes to every matching sensor not already
    /// covered by an earlier dispatch of the same request id.
    pub async fn dispatch(&self, mut req: UserRequest) -> Result<RequestRecord, DispatchError> {
        req.check().map_err(DispatchError::InvalidRequest)?;
        let id = match &req.id {
            Some(id) => id.clone(),
            None => {
                let id = format!(
                    "req-{}",
                    self.next_request.fetch_add(1, Ordering::SeqCst) + 1
                );
                req.id = Some(id.clone());
                id
            }
        };
        let matched = self.matching(&req.criteria);
        if matched.is_empty() {
            return Err(DispatchError::NoMatch(req.criteria));
        }
        let now = self.clock.now_ms();
        let mut record = self.request(&id).unwrap_or_else(|| RequestRecord {
            id: id.clone(),
            request: req.clone(),
            created_at: now,
            subscriptions: Vec::new(),
            failures: Vec::new(),
        });
        // a retry keeps the original request and deadline
        let req = record.request.clone();
        let expiry = record.created_at + req.duration_ms as i64;
        record.failures.clear();
        for rec in matched {
            let done = record
                .subscriptions
                .iter()
                .any(|s| s.node_id == rec.node_id() && s.vs_name == rec.vs_name());
            if done {
                continue;
            }
            match self.subscribe(&rec, &req, expiry).await {
                Ok(sub_id) => {
                    self.routes.write().insert(
                        (rec.node_id().to_string(), sub_id.clone()),
                        (id.clone(), rec.vs_name().to_string()),
                    );
                    record.subscriptions.push(DispatchedSubscription {
                        node_id: rec.node_id().to_string(),
                        vs_name: rec.vs_name().to_string(),
                        subscription_id: sub_id,
                        expiry,
                    });
                }
                Err((error, detail)) => {
                    tracing::warn!(request = %id, node = %rec.node_id(), vs = %rec.vs_name(), %error, %detail, "dispatch failed");
                    record.failures.push(DispatchFailure {
                        node_id: rec.node_id().to_string(),
                        vs_name: rec.vs_name().to_string(),
                        error,
                        detail,
                    });
                }
            }
        }
        self.requests.write().insert(id, record.clone());
        self.persist();
        Ok(record)
    }

    async fn subscribe(
        &self,
        rec: &RegistryRecord,
        req: &UserRequest,
        expiry: TimestampMs,
    ) -> Result<String, (String, String)> {
        let body = SubscriptionRequest {
            vs_name: rec.vs_name().to_string(),
            mode: SubscriptionMode::Push,
            delivery_endpoint: Some(self.ingest_endpoint(rec.node_id())),
            interval_ms: req.interval_ms,
            expiry,
            payload: req.payload,
            window: req.window,
            aggregations: req.aggregations.clone(),
        };
        let url = format!("{}/subscriptions", rec.node_base_url);
        let body = serde_json::to_vec(&body).expect("subscription requests serialize");
        let resp = self
            .http
            .post_json(&url, body)
            .await
            .map_err(|e| ("NodeUnreachable".to_string(), e.to_string()))?;
        if !resp.is_success() {
            return Err(match resp.error_body() {
                Some(e) => (e.error, e.detail),
                None => ("NodeError".into(), format!("{url}: status {}", resp.status)),
            });
        }
        resp.json()
            .and_then(|j| j["id"].as_str().map(String::from))
            .ok_or_else(|| {
                (
                    "NodeError".into(),
                    format!("{url}: response without subscription id"),
                )
            })
    }

    /// Stores one delivery. `node_id` comes from the delivery endpoint the
    /// registry handed out; without it the delivery cannot be attributed.
    pub fn ingest(&self, node_id: Option<&str>, body: &[u8]) -> Result<IngestOutcome, IngestError> {
        let d: Delivery =
            serde_json::from_slice(body).map_err(|e| IngestError::Malformed(e.to_string()))?;
        let now = self.clock.now_ms();
        let route = node_id.and_then(|n| {
            self.routes
                .read()
                .get(&(n.to_string(), d.subscription_id.clone()))
                .cloned()
        });
        let (Some(node_id), Some((request_id, vs_name))) = (node_id, route) else {
            let _guard = self.quarantine.lock();
            let line = json!({
                "received_at": now,
                "node_id": node_id,
                "delivery": serde_json::from_slice::<Json>(body).unwrap_or(Json::Null),
            });
            append_line(&self.data_dir.join(QUARANTINE_FILE), &line)?;
            self.quarantined.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(node = ?node_id, subscription = %d.subscription_id, "delivery for unknown subscription quarantined");
            return Ok(IngestOutcome::Quarantined);
        };
        let key = (
            node_id.to_string(),
            d.subscription_id.clone(),
            d.sequence_no,
        );
        if !self.seen.lock().insert(key.clone()) {
            self.duplicates.fetch_add(1, Ordering::Relaxed);
            return Ok(IngestOutcome::Duplicate);
        }
        let row = json!({
            "node_id": node_id,
            "vs_name": vs_name,
            "subscription_id": d.subscription_id,
            "sequence_no": d.sequence_no,
            "sent_at": d.sent_at,
            "received_at": now,
            "payload": d.payload,
        });
        let log = self.log_for(&request_id)?;
        let mut file = log.lock();
        let mut line = serde_json::to_vec(&row).expect("JSON values serialize");
        line.push(b'\n');
        if let Err(e) = file.write_all(&line) {
            self.seen.lock().remove(&key);
            return Err(e.into());
        }
        self.ingested.fetch_add(1, Ordering::Relaxed);
        Ok(IngestOutcome::Stored)
    }

    fn log_for(&self, request_id: &str) -> io::Result<Arc<Mutex<File>>> {
        let mut logs = self.logs.lock();
        if let Some(f) = logs.get(request_id) {
            return Ok(f.clone());
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.results_path(request_id))?;
        let f = Arc::new(Mutex::new(f));
        logs.insert(request_id.to_string(), f.clone());
        Ok(f)
    }

    pub fn results_path(&self, request_id: &str) -> PathBuf {
        self.data_dir
            .join(RESULTS_DIR)
            .join(format!("{request_id}.jsonl"))
    }

    /// Ingested rows of a request in arrival order; `None` for an unknown
    /// request.
    pub fn results(&self, request_id: &str) -> Option<io::Result<Vec<Json>>> {
        self.request(request_id)?;
        Some(match read_jsonl(&self.results_path(request_id)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            other => other,
        })
    }

    /// Writes the snapshot file (atomically, via rename).
    pub fn persist(&self) {
        let _guard = self.snapshot_lock.lock();
        let snap = Snapshot {
            records: self.table.read().clone(),
            requests: self.requests(),
            next_request: self.next_request.load(Ordering::SeqCst),
        };
        let path = self.data_dir.join(SNAPSHOT_FILE);
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(&snap).expect("snapshot serializes");
        if let Err(err) = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, &path)) {
            tracing::error!(path = %path.display(), %err, "cannot write registry snapshot");
        }
    }
}

fn append_line(path: &Path, v: &Json) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(v).expect("JSON values serialize");
    line.push(b'\n');
    f.write_all(&line)
}

fn read_jsonl(path: &Path) -> io::Result<Vec<Json>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line after a crash is skipped
        if let Ok(v) = serde_json::from_str(&line) {
            out.push(v);
        }
    }
    Ok(out)
}
