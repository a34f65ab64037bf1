//! Completion providers behind one interface: a live chat-completions HTTP
//! client, a deterministic scripted driving policy and a replay cache.
//!
//! Every call through the [`Registry`] is appended to a transcript. When a
//! recording directory is set, completions from live backends are also
//! cached under `<dir>/<backend_id>/<hash>.json` so the run can be replayed.

mod config;
mod http;
mod replay;
pub mod scripted;
mod transcript;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::FusedPacket;
use crate::m3cot::{M3CoTResult, StageKind};
use crate::signals::Formulation;
use crate::world_sim::{FrameRef, Observation, VehicleLimits};
use crate::AgentId;

pub use config::{BackendConfig, BackendFile, BackendKind};
pub use http::HttpChatBackend;
pub use replay::{call_key, CacheEntry, ReplayBackend};
pub use scripted::ScriptedBackend;
pub use transcript::{ImageRef, TranscriptRecord, TranscriptSink};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend {backend_id}: timed out after {timeout_s} s")]
    Timeout { backend_id: String, timeout_s: f64 },
    #[error("backend {backend_id}: HTTP {status}: {body}")]
    Http {
        backend_id: String,
        status: u16,
        body: String,
    },
    #[error("backend {backend_id}: transport error: {message}")]
    Transport { backend_id: String, message: String },
    #[error("backend {backend_id}: credential variable {var} is not set")]
    MissingCredential { backend_id: String, var: String },
    #[error("backend {backend_id}: no cached completion for request {hash}")]
    CacheMiss { backend_id: String, hash: String },
    #[error("backend {backend_id}: {message}")]
    Policy { backend_id: String, message: String },
    #[error("backend {backend_id}: empty completion")]
    Empty { backend_id: String },
    #[error("unknown backend {0}")]
    Unknown(String),
    #[error("backend config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(s: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: s.into(),
        }
    }

    pub fn user(s: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: s.into(),
        }
    }
}

/// What a call is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Purpose {
    Stage(StageKind),
    Decision(Formulation),
}

impl Purpose {
    pub fn label(&self) -> String {
        match self {
            Purpose::Stage(s) => s.as_str().to_string(),
            Purpose::Decision(f) => format!("decision_{}", f.as_str()),
        }
    }
}

/// Structured view of the call for policies that do not read prose.
#[derive(Debug, Clone)]
pub struct PolicyContext {
    pub observation: Observation,
    pub prior: M3CoTResult,
    pub received: Vec<FusedPacket>,
    pub limits: VehicleLimits,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub images: Vec<FrameRef>,
    pub purpose: Purpose,
    pub tick: u64,
    pub agent: AgentId,
    pub policy: Option<Arc<PolicyContext>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            latency_s: 0.0,
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    /// True for backends whose completions should be cached for replay.
    fn is_live(&self) -> bool {
        false
    }
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError>;
}

pub fn image_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable digest of the request content: the messages and the digests of
/// the attached images. Call bookkeeping (tick, agent) is excluded.
pub fn request_hash(messages: &[ChatMessage], images: &[FrameRef]) -> String {
    let canon = serde_json::json!({
        "messages": messages,
        "images": images.iter().map(|i| image_digest(&i.bytes)).collect::<Vec<_>>(),
    });
    hex::encode(Sha256::digest(canon.to_string().as_bytes()))
}

/// Backends by id plus the shared transcript.
pub struct Registry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    transcripts: TranscriptSink,
    record_dir: Option<PathBuf>,
    record_lock: std::sync::Mutex<()>,
}

impl Registry {
    pub fn new() -> Self {
        Registry {
            backends: BTreeMap::new(),
            transcripts: TranscriptSink::default(),
            record_dir: None,
            record_lock: std::sync::Mutex::new(()),
        }
    }

    pub fn with(mut self, backend: Arc<dyn Backend>) -> Self {
        self.insert(backend);
        self
    }

    pub fn insert(&mut self, backend: Arc<dyn Backend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    /// Caches live completions under `dir` for later replay.
    pub fn record_to(&mut self, dir: PathBuf) {
        self.record_dir = Some(dir);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(|k| k.as_str())
    }

    pub fn has_live(&self) -> bool {
        self.backends.values().any(|b| b.is_live())
    }

    pub fn transcripts(&self) -> &TranscriptSink {
        &self.transcripts
    }

    pub fn complete(&self, backend_id: &str, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let backend = self
            .backends
            .get(backend_id)
            .ok_or_else(|| BackendError::Unknown(backend_id.to_string()))?;
        let hash = request_hash(&req.messages, &req.images);
        let started = Instant::now();
        let result = backend.complete(req);
        let wall = started.elapsed().as_secs_f64();
        let (text, latency_s, error, tokens) = match &result {
            Ok(c) => (c.text.clone(), c.latency_s, None, (c.prompt_tokens, c.completion_tokens)),
            Err(e) => (String::new(), wall, Some(e.to_string()), (None, None)),
        };
        if let (Ok(c), Some(dir), true) = (&result, &self.record_dir, backend.is_live()) {
            let _guard = self.record_lock.lock().expect("record lock");
            if let Err(e) = CacheEntry::record(&dir.join(backend_id), &hash, req, c) {
                log::warn!("failed to cache completion {hash}: {e}");
            }
        }
        self.transcripts.push(TranscriptRecord {
            tick: req.tick,
            agent: req.agent.clone(),
            purpose: req.purpose.label(),
            seq: 0,
            backend_id: backend_id.to_string(),
            hash,
            messages: req.messages.clone(),
            images: req.images.iter().map(ImageRef::from_frame).collect(),
            completion: text,
            latency_s,
            prompt_tokens: tokens.0,
            completion_tokens: tokens.1,
            error,
        });
        result
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}
