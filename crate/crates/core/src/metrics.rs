//! Latency histograms and the node metrics snapshot.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::offload::EnergyEstimate;

const LINEAR: u64 = 64;
const SUB_BITS: u32 = 5;
const SUB: usize = 1 << SUB_BITS;
const BUCKETS: usize = LINEAR as usize + (64 - 6) * SUB;

/// Streaming log-linear histogram over microseconds: exact below 64 µs,
/// then 32 buckets per power of two (about 3% relative resolution).
#[derive(Debug, Clone)]
pub struct LatencyHistogram {
    counts: Vec<u64>,
    count: u64,
    sum_us: u128,
    min_us: u64,
    max_us: u64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self {
            counts: vec![0; BUCKETS],
            count: 0,
            sum_us: 0,
            min_us: u64::MAX,
            max_us: 0,
        }
    }
}

fn bucket_of(v: u64) -> usize {
    if v < LINEAR {
        return v as usize;
    }
    let exp = 63 - v.leading_zeros();
    let sub = ((v >> (exp - SUB_BITS)) as usize) & (SUB - 1);
    LINEAR as usize + (exp as usize - 6) * SUB + sub
}

fn bucket_upper(i: usize) -> u64 {
    if i < LINEAR as usize {
        return i as u64;
    }
    let k = i - LINEAR as usize;
    let exp = (k / SUB) as u32 + 6;
    let sub = (k % SUB) as u64;
    let base = 1u64 << exp;
    let width = 1u64 << (exp - SUB_BITS);
    base.saturating_add((sub + 1).saturating_mul(width))
        .saturating_sub(1)
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, d: Duration) {
        self.record_us(u64::try_from(d.as_micros()).unwrap_or(u64::MAX));
    }

    pub fn record_us(&mut self, us: u64) {
        self.counts[bucket_of(us)] += 1;
        self.count += 1;
        self.sum_us += us as u128;
        self.min_us = self.min_us.min(us);
        self.max_us = self.max_us.max(us);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds every observation of `other` to `self`.
    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.count += other.count;
        self.sum_us += other.sum_us;
        self.min_us = self.min_us.min(other.min_us);
        self.max_us = self.max_us.max(other.max_us);
    }

    /// Upper bound of the bucket holding the `q` quantile, in µs.
    pub fn quantile_us(&self, q: f64) -> u64 {
        if self.count == 0 {
            return 0;
        }
        let rank = ((q.clamp(0.0, 1.0) * self.count as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (i, c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return bucket_upper(i).clamp(self.min_us, self.max_us);
            }
        }
        self.max_us
    }

    pub fn summary(&self) -> HistogramSummary {
        let ms = |us: u64| us as f64 / 1000.0;
        if self.count == 0 {
            return HistogramSummary::default();
        }
        HistogramSummary {
            count: self.count,
            mean_ms: self.sum_us as f64 / self.count as f64 / 1000.0,
            p50_ms: ms(self.quantile_us(0.50)),
            p95_ms: ms(self.quantile_us(0.95)),
            max_ms: ms(self.max_us),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorMetrics {
    pub samples_ok: u64,
    pub samples_dropped: u64,
    pub out_of_order: u64,
    pub plugin_state: String,
    pub restarts: u64,
    pub l1: HistogramSummary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubscriptionMetrics {
    pub vs_name: String,
    pub deliveries: u64,
    pub retries: u64,
    pub drops: u64,
    pub bytes_sent: u64,
    pub active: bool,
}

/// JSON body of `GET /metrics`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub node_id: String,
    pub sensors: BTreeMap<String, SensorMetrics>,
    pub subscriptions: BTreeMap<String, SubscriptionMetrics>,
    /// Sampling latency over all sensors.
    #[serde(default)]
    pub l1: HistogramSummary,
    pub l2: HistogramSummary,
    pub bytes_sent: u64,
    pub messages_sent: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyEstimate<f64>>,
}
