//! Synthetic energy model and the local-processing vs forwarding rule.
//!
//! The model is affine: a per-sample processing cost, a per-transmission
//! radio wake cost, and a per-byte payload cost. Energy is unitless.

use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("cost input {0} must be non-negative and finite")]
    NegativeInput(&'static str),
}

/// Cost coefficients, declared in node config under `cost_model`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParameters<T> {
    pub c_proc_per_sample: T,
    pub c_radio_wake: T,
    pub c_per_byte: T,
}

impl<T: Float> CostParameters<T> {
    pub fn new(c_proc_per_sample: T, c_radio_wake: T, c_per_byte: T) -> Result<Self, CostError> {
        let p = Self {
            c_proc_per_sample,
            c_radio_wake,
            c_per_byte,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        check("c_proc_per_sample", self.c_proc_per_sample)?;
        check("c_radio_wake", self.c_radio_wake)?;
        check("c_per_byte", self.c_per_byte)
    }

    /// All coefficients multiplied by `k`.
    pub fn scaled(&self, k: T) -> Self {
        Self {
            c_proc_per_sample: self.c_proc_per_sample * k,
            c_radio_wake: self.c_radio_wake * k,
            c_per_byte: self.c_per_byte * k,
        }
    }
}

impl<T: Float> Default for CostParameters<T> {
    fn default() -> Self {
        Self {
            c_proc_per_sample: T::zero(),
            c_radio_wake: T::one(),
            c_per_byte: T::zero(),
        }
    }
}

fn check<T: Float>(name: &'static str, v: T) -> Result<(), CostError> {
    if v.is_finite() && v >= T::zero() {
        Ok(())
    } else {
        Err(CostError::NegativeInput(name))
    }
}

fn cast<T: Float>(n: u64) -> T {
    T::from(n).expect("u64 converts to any float type")
}

/// Processing-side and communication-side energy, with a per-component
/// breakdown whose values sum to `e_alpha + e_beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate<T> {
    pub e_alpha: T,
    pub e_beta: T,
    pub breakdown: BTreeMap<String, T>,
}

impl<T: Float> EnergyEstimate<T> {
    pub fn total(&self) -> T {
        self.e_alpha + self.e_beta
    }

    pub fn breakdown_total(&self) -> T {
        self.breakdown.values().fold(T::zero(), |a, &b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ProcessLocally,
    ForwardRaw,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ProcessLocally => "process_locally",
            Strategy::ForwardRaw => "forward_raw",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Plan-level energy of both strategies for one emit period.
///
/// `e_alpha`: process all `n_samples`, then send one aggregate message.
/// `e_beta`: send every raw sample as its own message.
pub fn estimate<T: Float>(
    params: &CostParameters<T>,
    n_samples: u64,
    raw_bytes_per_sample: u64,
    aggregate_bytes: u64,
) -> Result<EnergyEstimate<T>, CostError> {
    params.validate()?;
    let n = cast::<T>(n_samples);
    let alpha_proc = params.c_proc_per_sample * n;
    let alpha_wake = params.c_radio_wake;
    let alpha_bytes = params.c_per_byte * cast(aggregate_bytes);
    let beta_wake = n * params.c_radio_wake;
    let beta_bytes = n * params.c_per_byte * cast(raw_bytes_per_sample);

    let breakdown = BTreeMap::from([
        ("alpha.processing".to_string(), alpha_proc),
        ("alpha.radio_wake".to_string(), alpha_wake),
        ("alpha.payload_bytes".to_string(), alpha_bytes),
        ("beta.radio_wake".to_string(), beta_wake),
        ("beta.payload_bytes".to_string(), beta_bytes),
    ]);
    Ok(EnergyEstimate {
        e_alpha: alpha_proc + alpha_wake + alpha_bytes,
        e_beta: beta_wake + beta_bytes,
        breakdown,
    })
}

/// Process locally only when it is strictly cheaper; equality forwards.
pub fn decide<T: PartialOrd>(e_alpha: T, e_beta: T) -> Strategy {
    if e_alpha < e_beta {
        Strategy::ProcessLocally
    } else {
        Strategy::ForwardRaw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionPlan<T> {
    pub strategy: Strategy,
    pub estimate: EnergyEstimate<T>,
}

pub fn plan<T: Float>(
    params: &CostParameters<T>,
    n_samples: u64,
    raw_bytes_per_sample: u64,
    aggregate_bytes: u64,
) -> Result<TransmissionPlan<T>, CostError> {
    let estimate = estimate(params, n_samples, raw_bytes_per_sample, aggregate_bytes)?;
    Ok(TransmissionPlan {
        strategy: decide(estimate.e_alpha, estimate.e_beta),
        estimate,
    })
}

/// Realized energy from a node's counters: processing of every accepted
/// sample, plus one radio wake per message sent and the bytes actually sent.
pub fn account<T: Float>(
    snapshot: &MetricsSnapshot,
    params: &CostParameters<T>,
) -> EnergyEstimate<T> {
    let samples: u64 = snapshot.sensors.values().map(|s| s.samples_ok).sum();
    let processing = params.c_proc_per_sample * cast(samples);
    let wake = params.c_radio_wake * cast(snapshot.messages_sent);
    let bytes = params.c_per_byte * cast(snapshot.bytes_sent);
    EnergyEstimate {
        e_alpha: processing,
        e_beta: wake + bytes,
        breakdown: BTreeMap::from([
            ("processing".to_string(), processing),
            ("radio_wake".to_string(), wake),
            ("payload_bytes".to_string(), bytes),
        ]),
    }
}
