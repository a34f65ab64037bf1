use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{image_digest, ChatMessage};
use crate::world_sim::FrameRef;
use crate::AgentId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub label: String,
    pub media_type: String,
    pub bytes: usize,
    pub sha256: String,
}

impl ImageRef {
    pub fn from_frame(f: &FrameRef) -> Self {
        ImageRef {
            label: f.label.clone(),
            media_type: f.media_type.clone(),
            bytes: f.bytes.len(),
            sha256: image_digest(&f.bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub tick: u64,
    pub agent: AgentId,
    pub purpose: String,
    /// Position of the call among this agent's calls in this tick.
    pub seq: u32,
    pub backend_id: String,
    pub hash: String,
    pub messages: Vec<ChatMessage>,
    pub images: Vec<ImageRef>,
    pub completion: String,
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Serialized transcript appends from any number of threads. Records come
/// out ordered by (tick, agent, seq) regardless of arrival order.
type Sequenced = (Vec<TranscriptRecord>, BTreeMap<(u64, AgentId), u32>);

#[derive(Debug, Default)]
pub struct TranscriptSink {
    inner: Mutex<Sequenced>,
}

impl TranscriptSink {
    pub fn push(&self, mut rec: TranscriptRecord) {
        let mut g = self.inner.lock().expect("transcript lock");
        let seq = g.1.entry((rec.tick, rec.agent.clone())).or_insert(0);
        rec.seq = *seq;
        *seq += 1;
        g.0.push(rec);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("transcript lock").0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records so far, in canonical order.
    pub fn snapshot(&self) -> Vec<TranscriptRecord> {
        let mut v = self.inner.lock().expect("transcript lock").0.clone();
        v.sort_by(|a, b| (a.tick, &a.agent, a.seq).cmp(&(b.tick, &b.agent, b.seq)));
        v
    }

    /// Removes and returns the records so far, in canonical order.
    pub fn drain(&self) -> Vec<TranscriptRecord> {
        let mut g = self.inner.lock().expect("transcript lock");
        let mut v = std::mem::take(&mut g.0);
        v.sort_by(|a, b| (a.tick, &a.agent, a.seq).cmp(&(b.tick, &b.agent, b.seq)));
        v
    }

    pub fn write_jsonl(records: &[TranscriptRecord], path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()
    }
}
