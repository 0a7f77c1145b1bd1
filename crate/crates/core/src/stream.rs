//! Bounded per-sensor history and windowed aggregation.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::element::{element_from_json, element_to_json, ElementError};
use crate::model::{
    AggFn, Aggregation, Schema, StreamElement, TimestampMs, Value, VirtualSensorDefinition,
    WindowKind, WindowSpec,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("timestamp {got} is older than last stored timestamp {last}")]
    OutOfOrderTimestamp { last: TimestampMs, got: TimestampMs },
}

/// Ring of the most recent elements of one virtual sensor.
#[derive(Debug, Clone)]
pub struct StreamStore {
    vs_name: String,
    schema: Schema,
    capacity: usize,
    ring: VecDeque<StreamElement>,
    total_appended: u64,
    rejected: u64,
}

impl StreamStore {
    pub fn new(vs_name: impl Into<String>, schema: Schema, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            vs_name: vs_name.into(),
            schema,
            capacity,
            ring: VecDeque::with_capacity(capacity.min(4096)),
            total_appended: 0,
            rejected: 0,
        }
    }

    pub fn vs_name(&self) -> &str {
        &self.vs_name
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn total_appended(&self) -> u64 {
        self.total_appended
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn latest(&self) -> Option<&StreamElement> {
        self.ring.back()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &StreamElement> + ExactSizeIterator {
        self.ring.iter()
    }

    /// Appends at the tail, evicting the head when full. The caller has
    /// already validated `e` against the schema.
    pub fn append(&mut self, e: StreamElement) -> Result<(), StoreError> {
        if let Some(last) = self.ring.back() {
            if e.timestamp < last.timestamp {
                self.rejected += 1;
                return Err(StoreError::OutOfOrderTimestamp {
                    last: last.timestamp,
                    got: e.timestamp,
                });
            }
        }
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(e);
        self.total_appended += 1;
        Ok(())
    }

    /// Elements whose absolute append sequence number is `>= seq`, oldest
    /// first, together with the number of requested elements that were
    /// already evicted.
    pub fn since_seq(&self, seq: u64) -> (Vec<StreamElement>, u64) {
        let first_held = self.total_appended - self.ring.len() as u64;
        let lost = first_held.saturating_sub(seq);
        let skip = seq.saturating_sub(first_held) as usize;
        (self.ring.iter().skip(skip).cloned().collect(), lost)
    }

    fn select(&self, window: WindowSpec, now: TimestampMs) -> (usize, usize) {
        match window.kind() {
            WindowKind::Count => {
                let n = (window.size() as usize).min(self.ring.len());
                (self.ring.len() - n, self.ring.len())
            }
            WindowKind::Time => {
                let lower = now.saturating_sub(window.size() as i64);
                let start = self.ring.partition_point(|e| e.timestamp <= lower);
                let end = self.ring.partition_point(|e| e.timestamp <= now);
                (start, end.max(start))
            }
        }
    }

    /// In-window raw elements, oldest first.
    pub fn query_raw(&self, window: WindowSpec, now: TimestampMs) -> Vec<StreamElement> {
        let (start, end) = self.select(window, now);
        self.ring.range(start..end).cloned().collect()
    }

    /// Evaluates `aggs` over the in-window selection.
    pub fn evaluate_window(
        &self,
        window: WindowSpec,
        aggs: &[Aggregation],
        now: TimestampMs,
    ) -> WindowResult {
        let (start, end) = self.select(window, now);
        let selection = self.ring.range(start..end);
        let agg_values = aggs
            .iter()
            .map(|a| {
                let idx = self.schema.index_of(a.field());
                let column = selection
                    .clone()
                    .filter_map(|e| idx.and_then(|i| e.values.get(i)));
                (a.key(), fold(a.func(), column))
            })
            .collect();
        WindowResult {
            vs_name: self.vs_name.clone(),
            window_end: now,
            agg_values,
            sample_count: (end - start) as u64,
        }
    }

    /// Replaces the content with `elements` (e.g. a journal replay), keeping
    /// only the newest `capacity` of them.
    pub fn restore(&mut self, elements: Vec<StreamElement>) {
        let skip = elements.len().saturating_sub(self.capacity);
        self.ring = elements.into_iter().skip(skip).collect();
        self.total_appended = self.ring.len() as u64;
    }
}

fn fold<'a>(func: AggFn, column: impl Iterator<Item = &'a Value>) -> Option<Value> {
    match func {
        AggFn::Count => Some(Value::Integer(column.count() as i64)),
        AggFn::Last => column.last().cloned(),
        AggFn::Sum => Some(Value::Double(
            column.filter_map(Value::as_f64).fold(0.0, |s, v| s + v),
        )),
        AggFn::Avg => {
            let (n, sum) = column
                .filter_map(Value::as_f64)
                .fold((0u64, 0.0), |(n, s), v| (n + 1, s + v));
            (n > 0).then(|| Value::Double(sum / n as f64))
        }
        AggFn::Min | AggFn::Max => column.fold(None, |best: Option<Value>, v| {
            let Some(b) = best else {
                return Some(v.clone());
            };
            let replace = match (&b, v) {
                (Value::Integer(x), Value::Integer(y)) => {
                    if func == AggFn::Min {
                        y < x
                    } else {
                        y > x
                    }
                }
                _ => match (b.as_f64(), v.as_f64()) {
                    (Some(x), Some(y)) => {
                        if func == AggFn::Min {
                            y < x
                        } else {
                            y > x
                        }
                    }
                    _ => false,
                },
            };
            Some(if replace { v.clone() } else { b })
        }),
    }
}

/// Output of one window evaluation. `agg_values` is keyed `field.fn`, in
/// aggregation-list order; `None` encodes an aggregate over an empty window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub vs_name: String,
    pub window_end: TimestampMs,
    pub agg_values: Vec<(String, Option<Value>)>,
    pub sample_count: u64,
}

impl WindowResult {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.agg_values
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.as_ref())
    }

    pub fn to_json(&self) -> Json {
        let aggs: Map<String, Json> = self
            .agg_values
            .iter()
            .map(|(k, v)| (k.clone(), v.as_ref().map_or(Json::Null, Value::to_json)))
            .collect();
        let mut m = Map::new();
        m.insert("vs_name".into(), self.vs_name.clone().into());
        m.insert("window_end".into(), self.window_end.into());
        m.insert("sample_count".into(), self.sample_count.into());
        m.insert("agg_values".into(), Json::Object(aggs));
        Json::Object(m)
    }

    pub fn from_json(j: &Json) -> Option<Self> {
        let aggs = j.get("agg_values")?.as_object()?;
        Some(Self {
            vs_name: j.get("vs_name")?.as_str()?.to_string(),
            window_end: j.get("window_end")?.as_i64()?,
            sample_count: j.get("sample_count")?.as_u64()?,
            agg_values: aggs
                .iter()
                .map(|(k, v)| {
                    let val = match v {
                        Json::Null => None,
                        Json::Number(n) => match n.as_i64() {
                            Some(i) => Some(Value::Integer(i)),
                            None => n.as_f64().map(Value::Double),
                        },
                        Json::String(s) => Some(Value::Str(s.clone())),
                        _ => None,
                    };
                    (k.clone(), val)
                })
                .collect(),
        })
    }
}

pub fn evaluate_window(
    store: &StreamStore,
    window: WindowSpec,
    aggs: &[Aggregation],
    now: TimestampMs,
) -> WindowResult {
    store.evaluate_window(window, aggs, now)
}

pub fn query_raw(store: &StreamStore, window: WindowSpec, now: TimestampMs) -> Vec<StreamElement> {
    store.query_raw(window, now)
}

/// The processed output a virtual sensor emits at `now`.
pub fn emit_tick(
    vsd: &VirtualSensorDefinition,
    store: &StreamStore,
    now: TimestampMs,
) -> WindowResult {
    store.evaluate_window(vsd.window(), vsd.aggregations(), now)
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("journal {path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: ElementError,
    },
}

/// Append-only `<dir>/<vs_name>.jsonl` file, one canonical element per line.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn path_for(dir: &Path, vs_name: &str) -> PathBuf {
        dir.join(format!("{vs_name}.jsonl"))
    }

    pub fn open(dir: &Path, vs_name: &str) -> Result<Self, JournalError> {
        let path = Self::path_for(dir, vs_name);
        let io_err = |source| JournalError::Io {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(dir).map_err(io_err)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, schema: &Schema, e: &StreamElement) -> Result<(), JournalError> {
        let json = element_to_json(schema, e).map_err(|source| JournalError::Corrupt {
            path: self.path.clone(),
            line: 0,
            source,
        })?;
        let mut line = serde_json::to_vec(&json).expect("JSON values always serialize");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|source| JournalError::Io {
                path: self.path.clone(),
                source,
            })
    }

    /// Reads the journal back, returning at most the newest `keep` elements.
    /// A missing journal is empty.
    pub fn replay(
        dir: &Path,
        vs_name: &str,
        schema: &Schema,
        keep: usize,
    ) -> Result<Vec<StreamElement>, JournalError> {
        let path = Self::path_for(dir, vs_name);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(JournalError::Io { path, source }),
        };
        let mut out = VecDeque::with_capacity(keep.min(4096));
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| JournalError::Io {
                path: path.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let json: Json = serde_json::from_str(&line).map_err(|e| JournalError::Corrupt {
                path: path.clone(),
                line: i + 1,
                source: ElementError::Malformed(e.to_string()),
            })?;
            let e = element_from_json(schema, &json).map_err(|source| JournalError::Corrupt {
                path: path.clone(),
                line: i + 1,
                source,
            })?;
            if out.len() == keep {
                out.pop_front();
            }
            if keep > 0 {
                out.push_back(e);
            }
        }
        Ok(out.into())
    }
}
