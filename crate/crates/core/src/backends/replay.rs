use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{request_hash, Backend, BackendError, Completion, CompletionRequest};

/// Cached completions of one request, stored as `<hash>.json`.
/// `completion` is the first one recorded; `by_call` keeps every answer
/// per call site, so a request seen twice with different answers
/// replays each answer where it was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub hash: String,
    pub completion: Completion,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_call: BTreeMap<String, Completion>,
}

/// Call-site key: tick, agent and purpose.
pub fn call_key(req: &CompletionRequest) -> String {
    format!("{}/{}/{}", req.tick, req.agent, req.purpose.label())
}

impl CacheEntry {
    /// Adds `completion` for `req` to the entry on disk, creating it if
    /// needed. Callers serialize writes to one directory.
    pub fn record(dir: &Path, hash: &str, req: &CompletionRequest, completion: &Completion) -> std::io::Result<()> {
        let mut entry = match Self::read(dir, hash) {
            Some(e) => e?,
            None => CacheEntry {
                hash: hash.to_string(),
                completion: completion.clone(),
                by_call: BTreeMap::new(),
            },
        };
        entry.by_call.insert(call_key(req), completion.clone());
        entry.write(dir)
    }

    /// The answer recorded at this call site, else the first answer.
    pub fn completion_for(&self, req: &CompletionRequest) -> &Completion {
        self.by_call.get(&call_key(req)).unwrap_or(&self.completion)
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.hash));
        let tmp = dir.join(format!(".{}.tmp", self.hash));
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(tmp, path)
    }

    pub fn read(dir: &Path, hash: &str) -> Option<std::io::Result<CacheEntry>> {
        let path = dir.join(format!("{hash}.json"));
        if !path.exists() {
            return None;
        }
        Some(
            std::fs::read(&path)
                .and_then(|b| serde_json::from_slice(&b).map_err(std::io::Error::other)),
        )
    }
}

/// Serves completions recorded by an earlier run; a miss is an error.
pub struct ReplayBackend {
    id: String,
    cache: PathBuf,
}

impl ReplayBackend {
    pub fn new(id: impl Into<String>, cache: impl Into<PathBuf>) -> Self {
        ReplayBackend {
            id: id.into(),
            cache: cache.into(),
        }
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let hash = request_hash(&req.messages, &req.images);
        match CacheEntry::read(&self.cache, &hash) {
            Some(Ok(e)) => Ok(e.completion_for(req).clone()),
            Some(Err(e)) => Err(BackendError::Transport {
                backend_id: self.id.clone(),
                message: format!("reading cache entry {hash}: {e}"),
            }),
            None => Err(BackendError::CacheMiss {
                backend_id: self.id.clone(),
                hash,
            }),
        }
    }
}
