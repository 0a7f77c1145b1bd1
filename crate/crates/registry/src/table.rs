use std::collections::BTreeMap;

use mosden_core::{NodeRegistration, SensorDescriptor, TimestampMs};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Metadata predicate: every `key=value` pair must hold.
pub type Criteria = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryRecord {
    #[serde(flatten)]
    pub descriptor: SensorDescriptor,
    pub node_base_url: String,
    pub last_seen: TimestampMs,
}

impl RegistryRecord {
    pub fn node_id(&self) -> &str {
        &self.descriptor.node_id
    }

    pub fn vs_name(&self) -> &str {
        &self.descriptor.vs_name
    }

    pub fn is_live(&self, now: TimestampMs, horizon_ms: i64) -> bool {
        now - self.last_seen <= horizon_ms
    }

    /// Criteria look at the metadata map first; `node_id` and `vs_name`
    /// also match the record's identity when the metadata lacks them.
    pub fn satisfies(&self, criteria: &Criteria) -> bool {
        criteria
            .iter()
            .all(|(k, v)| match self.descriptor.metadata.get(k) {
                Some(m) => m == v,
                None => match k.as_str() {
                    "node_id" => self.node_id() == v,
                    "vs_name" => self.vs_name() == v,
                    _ => false,
                },
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid registration: {0}")]
pub struct InvalidRegistration(pub String);

/// Records keyed by node, then virtual sensor name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordTable {
    nodes: BTreeMap<String, BTreeMap<String, RegistryRecord>>,
}

impl RecordTable {
    /// Upserts every descriptor of `reg`, stamping `last_seen = now`.
    /// Validation happens before any change, so a bad registration leaves
    /// the table untouched.
    pub fn upsert(
        &mut self,
        reg: &NodeRegistration,
        now: TimestampMs,
    ) -> Result<usize, InvalidRegistration> {
        check_registration(reg)?;
        if reg.descriptors.is_empty() {
            return Ok(0);
        }
        let node = self.nodes.entry(reg.node_id.clone()).or_default();
        for d in &reg.descriptors {
            node.insert(
                d.vs_name.clone(),
                RegistryRecord {
                    descriptor: d.clone(),
                    node_base_url: reg.base_url.trim_end_matches('/').to_string(),
                    last_seen: now,
                },
            );
        }
        Ok(reg.descriptors.len())
    }

    /// All records, grouped by node.
    pub fn records(&self) -> impl Iterator<Item = &RegistryRecord> {
        self.nodes.values().flat_map(|n| n.values())
    }

    pub fn len(&self) -> usize {
        self.nodes.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, node_id: &str, vs_name: &str) -> Option<&RegistryRecord> {
        self.nodes.get(node_id)?.get(vs_name)
    }

    /// Live records satisfying every criterion.
    pub fn matching(
        &self,
        criteria: &Criteria,
        now: TimestampMs,
        horizon_ms: i64,
    ) -> Vec<RegistryRecord> {
        self.records()
            .filter(|r| r.is_live(now, horizon_ms) && r.satisfies(criteria))
            .cloned()
            .collect()
    }
}

fn check_registration(reg: &NodeRegistration) -> Result<(), InvalidRegistration> {
    let bad = |m: String| Err(InvalidRegistration(m));
    if reg.node_id.is_empty() {
        return bad("node_id must not be empty".into());
    }
    match url::Url::parse(&reg.base_url) {
        Ok(u) if matches!(u.scheme(), "http" | "https") && u.host_str().is_some() => {}
        _ => return bad(format!("base_url {:?} is not an http(s) URL", reg.base_url)),
    }
    for d in &reg.descriptors {
        if d.node_id != reg.node_id {
            return bad(format!(
                "descriptor {} names node {:?}, registration is for {:?}",
                d.vs_name, d.node_id, reg.node_id
            ));
        }
        d.validate()
            .map_err(|e| InvalidRegistration(format!("{}: {e}", d.vs_name)))?;
    }
    Ok(())
}
