//! The TOML run configuration. Relative paths inside the file resolve
//! against the file's own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use deliberag_core::agents::{RoleId, RoleOverride};
use deliberag_core::backend::BackendConfig;
use deliberag_core::corpus::ChunkPolicy;
use deliberag_core::discussion::DiscussionConfig;
use deliberag_core::report::DEFAULT_RELEVANCE_THRESHOLD;

pub const DEFAULT_TASK: &str = "Validate whether a proposed temporary nuclear waste storage site near Winslow, Arizona, \
                                meets basic national regulatory requirements.";

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Relevance labels for precision/recall; optional.
    pub labels: Option<PathBuf>,
    pub relevance_threshold: f64,
    /// Warn at ingest when the manifest is older than this many days.
    pub max_manifest_age_days: u64,
    pub chunking: ChunkPolicy,
    /// `backend.temperature` is the generation temperature for the whole run.
    pub backend: BackendConfig,
    pub discussion: DiscussionConfig,
    pub roles: BTreeMap<RoleId, RoleOverride>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("out"),
            labels: None,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            max_manifest_age_days: 365,
            chunking: ChunkPolicy::default(),
            backend: BackendConfig::default(),
            discussion: DiscussionConfig::default(),
            roles: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&raw).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.manifest.as_mut() {
            rebase(m);
        }
        if let Some(l) = cfg.labels.as_mut() {
            rebase(l);
        }
        if let Some(s) = cfg.backend.mock_script.as_mut() {
            rebase(s);
        }
        rebase(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.relevance_threshold) {
            return Err(format!("relevance_threshold must be within [0, 1], got {}", self.relevance_threshold));
        }
        self.chunking.validate().map_err(|e| e.to_string())?;
        self.backend.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}
