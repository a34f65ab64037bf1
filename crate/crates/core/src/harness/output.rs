use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feed::{OperatorCommand, ServerFrame};
use super::HarnessError;
use crate::backends::TranscriptRecord;
use crate::comms::ChannelEvent;
use crate::metrics::{read_results, render_table, summarize, EpisodeLog, EpisodeMetrics, ResultRecord};
use crate::signals::{DrivingSignal, Formulation};
use crate::world_sim::CavStatus;
use crate::AgentId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAgent {
    pub id: AgentId,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub status: CavStatus,
    /// Route completion, percent.
    pub progress: f64,
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

/// State after one physics step and the commands that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub time: f64,
    pub agents: Vec<TrajectoryAgent>,
}

/// Why a CAV is not executing a fresh decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fallback {
    /// The completion had no usable signal block.
    ParseFailure { reason: String },
    /// A backend failed; the previous tick's signal stays in force.
    HoldLast { error: String },
    /// A backend failed and there is no fresh signal to hold.
    SafeStop { error: String },
    /// The operator disengaged the CAV.
    Disengaged,
    /// Too many consecutive backend failures; the CAV is out.
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub tick: u64,
    pub time: f64,
    pub agent: AgentId,
    pub formulation: Formulation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<DrivingSignal>,
    /// The executed signal slows the car, or it is stopping.
    pub braking: bool,
    /// `Reason:` lines of the completion.
    pub reasons: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Fallback>,
    /// Senders whose packets were in the decision context.
    pub received: Vec<AgentId>,
    /// Intent text of each received packet, same order as `received`.
    pub received_intents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorRecord {
    pub tick: u64,
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_id: Option<String>,
    pub command: OperatorCommand,
    pub ack: ServerFrame,
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let io = |e| HarnessError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut f, item).map_err(|e| io(e.into()))?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

fn write_json<T: Serialize>(path: &Path, item: &T) -> Result<(), HarnessError> {
    let bytes = serde_json::to_vec_pretty(item).map_err(|e| HarnessError::io(path, e.into()))?;
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// File names inside a run directory.
pub struct RunFiles;

impl RunFiles {
    pub const TRAJECTORY: &'static str = "trajectory.jsonl";
    pub const CHANNEL: &'static str = "channel.jsonl";
    pub const DECISIONS: &'static str = "decisions.jsonl";
    pub const TRANSCRIPTS: &'static str = "transcripts.jsonl";
    pub const OPERATOR: &'static str = "operator.jsonl";
    pub const EPISODE: &'static str = "episode.json";
    pub const METRICS: &'static str = "metrics.json";
    pub const RESULTS: &'static str = "results.jsonl";
    /// Recorded live completions, one subdirectory per backend.
    pub const CACHE: &'static str = "cache";
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn write_run(
    dir: &Path,
    trajectory: &[TrajectoryRecord],
    channel: &[ChannelEvent],
    decisions: &[DecisionRecord],
    transcripts: &[TranscriptRecord],
    operator: &[OperatorRecord],
    log: &EpisodeLog,
    metrics: &EpisodeMetrics,
    results: &[ResultRecord],
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_jsonl(&dir.join(RunFiles::TRAJECTORY), trajectory)?;
    write_jsonl(&dir.join(RunFiles::CHANNEL), channel)?;
    write_jsonl(&dir.join(RunFiles::DECISIONS), decisions)?;
    write_jsonl(&dir.join(RunFiles::TRANSCRIPTS), transcripts)?;
    write_jsonl(&dir.join(RunFiles::OPERATOR), operator)?;
    write_json(&dir.join(RunFiles::EPISODE), log)?;
    write_json(&dir.join(RunFiles::METRICS), metrics)?;
    write_jsonl(&dir.join(RunFiles::RESULTS), results)
}

/// Reads the episode log of a run directory.
pub fn load_run(dir: &Path) -> Result<EpisodeLog, HarnessError> {
    let p = dir.join(RunFiles::EPISODE);
    let bytes = std::fs::read(&p).map_err(|e| HarnessError::io(&p, e))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::io(&p, e.into()))
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_results(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RunFiles::RESULTS) {
            out.push(p);
        }
    }
    Ok(())
}

/// Table over every results file under `dir`. A matrix directory holds a
/// top-level results file, which is used alone when present.
pub fn report(dir: &Path) -> Result<String, HarnessError> {
    let top = dir.join(RunFiles::RESULTS);
    let files = if top.exists() {
        vec![top]
    } else {
        let mut v = Vec::new();
        find_results(dir, &mut v).map_err(|e| HarnessError::io(dir, e))?;
        v
    };
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_results(f).map_err(|e| HarnessError::io(f, e))?);
    }
    let title = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    Ok(render_table(&title, &summarize(&records)))
}
