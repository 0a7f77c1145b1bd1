use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mosden_core::protocol::{ManifestError, PluginManifest, MANIFEST_FILE};
use mosden_core::{PluginBinding, TimestampMs, Transport};

use super::transport::{InProcessCtor, InProcessLauncher, PluginLauncher, SubprocessLauncher};
use super::{HostConfig, HostError};

pub type InProcessFactory = InProcessCtor;

/// A manifest found on disk together with its directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstalledPlugin {
    pub manifest: PluginManifest,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscoveryWarning {
    Manifest { path: PathBuf, error: ManifestError },
    DuplicateId { path: PathBuf, plugin_id: String },
    Unreadable { path: PathBuf, detail: String },
}

impl std::fmt::Display for DiscoveryWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiscoveryWarning::Manifest { path, error } => {
                write!(f, "{}: {error}", path.display())
            }
            DiscoveryWarning::DuplicateId { path, plugin_id } => {
                write!(f, "{}: duplicate plugin_id {plugin_id:?}", path.display())
            }
            DiscoveryWarning::Unreadable { path, detail } => {
                write!(f, "{}: {detail}", path.display())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Discovery {
    pub plugins: Vec<InstalledPlugin>,
    pub warnings: Vec<DiscoveryWarning>,
}

/// Scans each subdirectory of `plugin_dir` for a manifest. Bad manifests
/// become warnings; only an unreadable `plugin_dir` is an error.
/// Subdirectories are visited in name order, so for duplicate ids the
/// first directory wins.
pub fn discover_plugins(plugin_dir: &Path) -> io::Result<Discovery> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(plugin_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Discovery::default();
    for dir in dirs {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            continue;
        }
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                out.warnings.push(DiscoveryWarning::Unreadable {
                    path,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        match PluginManifest::parse(&bytes) {
            Ok(m) if out.plugins.iter().any(|p| p.manifest.plugin_id == m.plugin_id) => {
                out.warnings.push(DiscoveryWarning::DuplicateId {
                    path,
                    plugin_id: m.plugin_id,
                });
            }
            Ok(manifest) => out.plugins.push(InstalledPlugin { manifest, dir }),
            Err(error) => out.warnings.push(DiscoveryWarning::Manifest { path, error }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionCandidate {
    pub plugin_id: String,
    pub size_bytes: u64,
    pub last_used: TimestampMs,
    pub active: bool,
}

/// Pure eviction policy: least-recently-used idle plugins go first (ties by
/// id) until the idle total fits in `budget_bytes`. Active plugins are never
/// chosen.
pub fn select_evictions(candidates: &[EvictionCandidate], budget_bytes: u64) -> Vec<String> {
    let mut idle: Vec<&EvictionCandidate> = candidates.iter().filter(|c| !c.active).collect();
    idle.sort_by(|a, b| {
        a.last_used
            .cmp(&b.last_used)
            .then_with(|| a.plugin_id.cmp(&b.plugin_id))
    });
    let mut total: u64 = idle.iter().map(|c| c.size_bytes).sum();
    let mut out = Vec::new();
    for c in idle {
        if total <= budget_bytes {
            break;
        }
        total -= c.size_bytes;
        out.push(c.plugin_id.clone());
    }
    out
}

struct Entry {
    plugin: InstalledPlugin,
    last_used: TimestampMs,
}

/// Installed manifests, built-in plugins and LRU bookkeeping for one node.
pub struct PluginRegistry {
    installed: BTreeMap<String, Entry>,
    in_process: BTreeMap<String, InProcessFactory>,
    active: HashMap<String, usize>,
    config: HostConfig,
}

impl PluginRegistry {
    pub fn new(config: HostConfig) -> Self {
        Self {
            installed: BTreeMap::new(),
            in_process: BTreeMap::new(),
            active: HashMap::new(),
            config,
        }
    }

    pub fn host_config(&self) -> HostConfig {
        self.config
    }

    pub fn register_in_process(&mut self, plugin_id: impl Into<String>, factory: InProcessFactory) {
        self.in_process.insert(plugin_id.into(), factory);
    }

    /// Adds (or replaces) an on-disk plugin.
    pub fn install(&mut self, plugin: InstalledPlugin) {
        let id = plugin.manifest.plugin_id.clone();
        let last_used = self.installed.get(&id).map_or(0, |e| e.last_used);
        self.installed.insert(id, Entry { plugin, last_used });
    }

    pub fn installed(&self) -> impl Iterator<Item = &InstalledPlugin> {
        self.installed.values().map(|e| &e.plugin)
    }

    pub fn manifest(&self, plugin_id: &str) -> Option<&PluginManifest> {
        self.installed.get(plugin_id).map(|e| &e.plugin.manifest)
    }

    pub fn is_active(&self, plugin_id: &str) -> bool {
        self.active.get(plugin_id).is_some_and(|n| *n > 0)
    }

    /// Launcher for `binding`. In-process bindings resolve against built-in
    /// plugins; subprocess bindings need an installed manifest and run from
    /// its directory.
    pub fn launcher_for(&self, binding: &PluginBinding) -> Result<Arc<dyn PluginLauncher>, HostError> {
        let id = binding.plugin_id();
        match binding.transport() {
            Transport::InProcess => {
                let f = self
                    .in_process
                    .get(id)
                    .ok_or_else(|| HostError::UnknownPlugin(id.to_string()))?;
                Ok(Arc::new(InProcessLauncher::new(f.clone())))
            }
            Transport::Subprocess => {
                let entry = self
                    .installed
                    .get(id)
                    .ok_or_else(|| HostError::UnknownPlugin(id.to_string()))?;
                let command = binding.command().unwrap_or_default().to_vec();
                Ok(Arc::new(SubprocessLauncher::new(
                    id,
                    command,
                    Some(entry.plugin.dir.clone()),
                    self.config.call_timeout,
                )))
            }
        }
    }

    pub fn acquire(&mut self, plugin_id: &str, now: TimestampMs) {
        *self.active.entry(plugin_id.to_string()).or_default() += 1;
        self.touch(plugin_id, now);
    }

    pub fn release(&mut self, plugin_id: &str, now: TimestampMs) {
        if let Some(n) = self.active.get_mut(plugin_id) {
            *n = n.saturating_sub(1);
        }
        self.touch(plugin_id, now);
    }

    pub fn touch(&mut self, plugin_id: &str, now: TimestampMs) {
        if let Some(e) = self.installed.get_mut(plugin_id) {
            e.last_used = e.last_used.max(now);
        }
    }

    pub fn candidates(&self) -> Vec<EvictionCandidate> {
        self.installed
            .iter()
            .map(|(id, e)| EvictionCandidate {
                plugin_id: id.clone(),
                size_bytes: e.plugin.manifest.size_bytes,
                last_used: e.last_used,
                active: self.is_active(id),
            })
            .collect()
    }

    /// Removes idle plugins (directories included) until the idle total
    /// fits the budget. Returns evicted ids in eviction order.
    pub fn evict_unused(&mut self, budget_bytes: u64) -> Vec<String> {
        let evicted = select_evictions(&self.candidates(), budget_bytes);
        for id in &evicted {
            if let Some(e) = self.installed.remove(id) {
                if let Err(err) = std::fs::remove_dir_all(&e.plugin.dir) {
                    tracing::warn!(plugin = %id, dir = %e.plugin.dir.display(), %err, "cannot remove evicted plugin");
                }
            }
        }
        if !evicted.is_empty() {
            tracing::info!(?evicted, "evicted unused plugins");
        }
        evicted
    }
}
