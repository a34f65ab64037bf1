use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, HttpChatBackend, Registry, ReplayBackend, ScriptedBackend};
use crate::m3cot::StageAssignment;
use crate::AgentId;

fn default_timeout() -> f64 {
    60.0
}

fn default_max_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendKind {
    HttpChat {
        endpoint: String,
        model: String,
        /// Environment variable holding the bearer token; none for open gateways.
        #[serde(default)]
        credential_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        #[serde(default)]
        temperature: f64,
        /// Minimum spacing between requests, seconds.
        #[serde(default)]
        min_interval_s: f64,
    },
    Scripted {
        policy: String,
    },
    Replay {
        cache: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Config(format!("backend {}: {m}", self.id)));
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return bad("id must be non-empty and usable as a directory name".into());
        }
        match &self.kind {
            BackendKind::HttpChat {
                endpoint,
                model,
                timeout_s,
                temperature,
                ..
            } => {
                if endpoint.is_empty() || model.is_empty() {
                    return bad("http_chat requires endpoint and model".into());
                }
                if !(*timeout_s > 0.0) {
                    return bad("timeout_s must be > 0".into());
                }
                if !(0.0..=2.0).contains(temperature) {
                    return bad("temperature must be in [0, 2]".into());
                }
            }
            BackendKind::Scripted { policy } => {
                if !ScriptedBackend::POLICIES.contains(&policy.as_str()) {
                    return bad(format!("unknown scripted policy {policy:?}"));
                }
            }
            BackendKind::Replay { cache } => {
                if cache.as_os_str().is_empty() {
                    return bad("replay requires a cache path".into());
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, BackendError> {
        self.validate()?;
        Ok(match &self.kind {
            BackendKind::HttpChat { .. } => Arc::new(HttpChatBackend::from_config(self)?),
            BackendKind::Scripted { policy } => Arc::new(ScriptedBackend::new(&self.id, policy)?),
            BackendKind::Replay { cache } => Arc::new(ReplayBackend::new(&self.id, cache)),
        })
    }

    pub fn is_live(&self) -> bool {
        matches!(self.kind, BackendKind::HttpChat { .. })
    }
}

/// Backend configuration file: the backends and how agents route stages
/// to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendFile {
    #[serde(rename = "backend")]
    pub backends: Vec<BackendConfig>,
    pub assignment: StageAssignment,
    /// Per-agent overrides for heterogeneous setups.
    #[serde(default)]
    pub agents: BTreeMap<AgentId, StageAssignment>,
}

impl BackendFile {
    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        let f: BackendFile = toml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    /// Loads a file, resolving replay cache paths against its directory.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut f = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for b in f.backends.iter_mut() {
            if let BackendKind::Replay { cache } = &mut b.kind {
                if cache.is_relative() {
                    *cache = base.join(&*cache);
                }
            }
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate()?;
            if !seen.insert(b.id.as_str()) {
                return Err(BackendError::Config(format!("duplicate backend id {}", b.id)));
            }
        }
        for a in std::iter::once(&self.assignment).chain(self.agents.values()) {
            for id in a.backend_ids() {
                if !seen.contains(id) {
                    return Err(BackendError::Config(format!("assignment names unknown backend {id}")));
                }
            }
        }
        Ok(())
    }

    pub fn assignment_for(&self, agent: &AgentId) -> &StageAssignment {
        self.agents.get(agent).unwrap_or(&self.assignment)
    }

    pub fn has_live(&self) -> bool {
        self.backends.iter().any(|b| b.is_live())
    }

    /// The same routing with every live backend served from a recording
    /// made under `record_dir`.
    pub fn as_replay(&self, record_dir: &Path) -> BackendFile {
        let mut f = self.clone();
        for b in f.backends.iter_mut().filter(|b| b.is_live()) {
            b.kind = BackendKind::Replay {
                cache: record_dir.join(&b.id),
            };
        }
        f
    }

    pub fn registry(&self) -> Result<Registry, BackendError> {
        let mut r = Registry::new();
        for b in &self.backends {
            r.insert(b.build()?);
        }
        Ok(r)
    }
}
