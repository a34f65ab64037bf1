//! Episode scoring: route completion, infraction penalty, driving score,
//! time consumed and transmission bandwidth, plus the results file and the
//! table layout used to compare configurations.
//!
//! Everything here is a pure function of an [`EpisodeLog`], so scores can be
//! recomputed offline from what a run wrote to disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::ChannelEvent;
use crate::world_sim::{CavStatus, InfractionEvent};
use crate::AgentId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

/// `1 - Π coefficient` over the events; 0 without events.
pub fn infraction_penalty(events: &[InfractionEvent]) -> f64 {
    1.0 - events.iter().map(|e| e.coefficient).product::<f64>()
}

/// `RC × (1 − IP)` with RC in percent.
pub fn driving_score(rc: f64, ip: f64) -> Result<f64, MetricsError> {
    if !(0.0..=100.0).contains(&rc) {
        return Err(MetricsError::OutOfRange {
            name: "RC",
            value: rc,
            range: "[0, 100]",
        });
    }
    if !(0.0..=1.0).contains(&ip) {
        return Err(MetricsError::OutOfRange {
            name: "IP",
            value: ip,
            range: "[0, 1]",
        });
    }
    Ok(rc * (1.0 - ip))
}

/// How one CAV ended the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub id: AgentId,
    /// Route completion in [0, 1].
    pub progress: f64,
    pub status: CavStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<f64>,
}

/// Everything scoring needs from a finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario: String,
    /// Simulation time when the episode stopped.
    pub end_time: f64,
    pub timed_out: bool,
    pub agents: Vec<AgentOutcome>,
    pub infractions: Vec<InfractionEvent>,
    pub channel: Vec<ChannelEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub agent: AgentId,
    pub ds: f64,
    pub rc: f64,
    pub ip: f64,
    /// Seconds until the route was done or the agent failed; episode end
    /// time for agents still driving.
    pub tc: f64,
    /// Mean KB per delivered message sent by this agent.
    pub tb: f64,
    pub status: CavStatus,
    pub infractions: Vec<InfractionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub agents: Vec<RunMetrics>,
    /// Time until the last CAV finished, or the episode end.
    pub tc: f64,
    /// Mean KB per delivered message across all senders.
    pub tb: f64,
}

impl EpisodeMetrics {
    pub fn agent(&self, id: &AgentId) -> Option<&RunMetrics> {
        self.agents.iter().find(|m| m.agent == *id)
    }
}

/// Scores every CAV in the log.
pub fn finalize(log: &EpisodeLog) -> EpisodeMetrics {
    let mut kb: BTreeMap<&AgentId, (f64, usize)> = BTreeMap::new();
    for e in log.channel.iter().filter(|e| !e.dropped) {
        let s = kb.entry(&e.sender).or_default();
        s.0 += e.size_bytes as f64 / 1024.0;
        s.1 += 1;
    }
    let (all_kb, all_n) = kb.values().fold((0.0, 0), |(k, n), v| (k + v.0, n + v.1));

    let agents: Vec<RunMetrics> = log
        .agents
        .iter()
        .map(|a| {
            let infractions: Vec<InfractionEvent> = log
                .infractions
                .iter()
                .filter(|e| e.agent_id == a.id)
                .cloned()
                .collect();
            let rc = (a.progress * 100.0).clamp(0.0, 100.0);
            let ip = infraction_penalty(&infractions);
            let ds = driving_score(rc, ip).expect("rc and ip are in range by construction");
            let tb = kb
                .get(&a.id)
                .map_or(0.0, |(k, n)| if *n == 0 { 0.0 } else { k / *n as f64 });
            RunMetrics {
                agent: a.id.clone(),
                ds,
                rc,
                ip,
                tc: a.finished_at.unwrap_or(log.end_time),
                tb,
                status: a.status,
                infractions,
            }
        })
        .collect();
    EpisodeMetrics {
        tc: agents.iter().map(|m| m.tc).fold(0.0, f64::max),
        tb: if all_n == 0 { 0.0 } else { all_kb / all_n as f64 },
        agents,
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Row label of the comparison the run belongs to.
    pub cell: String,
    pub scenario: String,
    pub style: String,
    pub signal: String,
    pub message: String,
    pub seed: u64,
    pub rep: u32,
    pub agent: AgentId,
    pub ds: f64,
    pub rc: f64,
    pub ip: f64,
    /// Per-agent time consumed.
    pub tc: f64,
    /// Episode time consumed (last CAV).
    pub episode_tc: f64,
    pub tb: f64,
    pub status: CavStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_results(records: &[ResultRecord], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_results(path: &Path) -> std::io::Result<Vec<ResultRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

/// One table row: DS and RC per vehicle slot, then TC and TB.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub vehicles: Vec<(f64, f64)>,
    pub tc: f64,
    pub tb: f64,
    pub episodes: usize,
    /// Episodes that errored before producing scores; not in the means.
    pub failed: usize,
}

/// Averages records per cell, keeping cells in first-seen order. Vehicle
/// slots follow agent id order within each episode.
pub fn summarize(records: &[ResultRecord]) -> Vec<TableRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<&str, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        if !cells.contains_key(r.cell.as_str()) {
            order.push(&r.cell);
        }
        cells.entry(&r.cell).or_default().push(r);
    }
    order
        .into_iter()
        .map(|cell| {
            let rs = &cells[cell];
            let mut failed: BTreeMap<(&str, u64, u32), ()> = BTreeMap::new();
            let mut episodes: BTreeMap<(&str, u64, u32), Vec<&ResultRecord>> = BTreeMap::new();
            for r in rs {
                if r.error.is_some() {
                    failed.insert((&r.scenario, r.seed, r.rep), ());
                    continue;
                }
                episodes.entry((&r.scenario, r.seed, r.rep)).or_default().push(r);
            }
            let slots = episodes.values().map(|e| e.len()).max().unwrap_or(0);
            let mut vehicles = vec![(0.0, 0.0, 0usize); slots];
            let (mut tc, mut tb) = (0.0, 0.0);
            for e in episodes.values_mut() {
                e.sort_by(|a, b| a.agent.cmp(&b.agent));
                for (i, r) in e.iter().enumerate() {
                    vehicles[i].0 += r.ds;
                    vehicles[i].1 += r.rc;
                    vehicles[i].2 += 1;
                }
                tc += e[0].episode_tc;
                tb += e.iter().map(|r| r.tb).sum::<f64>() / e.len() as f64;
            }
            let n = episodes.len().max(1) as f64;
            TableRow {
                label: cell.to_string(),
                vehicles: vehicles
                    .into_iter()
                    .map(|(d, r, k)| {
                        let k = k.max(1) as f64;
                        (d / k, r / k)
                    })
                    .collect(),
                tc: tc / n,
                tb: tb / n,
                episodes: episodes.len(),
                failed: failed.len(),
            }
        })
        .collect()
}

/// Plain-text table: Method, V1 DS, V1 RC, V2 DS, V2 RC, ..., TC, TB.
pub fn render_table(title: &str, rows: &[TableRow]) -> String {
    let slots = rows.iter().map(|r| r.vehicles.len()).max().unwrap_or(2).max(1);
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let mut header = format!("{:<label_w$}", "Method");
    for i in 1..=slots {
        let _ = write!(header, " | {:>6} {:>6}", format!("V{i} DS"), format!("V{i} RC"));
    }
    let _ = write!(header, " | {:>7} | {:>6}", "TC (s)", "TB (KB)");
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    for r in rows {
        let mut line = format!("{:<label_w$}", r.label);
        for i in 0..slots {
            match r.vehicles.get(i) {
                Some((ds, rc)) => {
                    let _ = write!(line, " | {ds:>6.1} {rc:>6.1}");
                }
                None => {
                    let _ = write!(line, " | {:>6} {:>6}", "-", "-");
                }
            }
        }
        let _ = write!(line, " | {:>7.1} | {:>7.1}", r.tc, r.tb);
        let _ = writeln!(out, "{line}");
    }
    for r in rows.iter().filter(|r| r.failed > 0) {
        let _ = writeln!(out, "{}: {} of {} episodes failed to run", r.label, r.failed, r.failed + r.episodes);
    }
    out
}
