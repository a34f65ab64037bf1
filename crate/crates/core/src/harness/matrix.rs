use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::run_episode;
use super::output::RunFiles;
use super::{HarnessError, RunConfig};
use crate::backends::BackendFile;
use crate::langpack::MessageMode;
use crate::m3cot::PromptStyle;
use crate::metrics::{render_table, summarize, write_results, ResultRecord};
use crate::signals::Formulation;

/// Settings a cell may change relative to the matrix base.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverrides {
    pub style: Option<PromptStyle>,
    pub signal: Option<Formulation>,
    pub message: Option<MessageMode>,
    /// Backend config path, relative to the matrix file.
    pub backend_config: Option<PathBuf>,
    pub range_m: Option<f64>,
    pub latency_s: Option<f64>,
    pub drop_prob: Option<f64>,
    pub max_message_bytes: Option<usize>,
    pub decision_tick: Option<f64>,
    pub timeout: Option<f64>,
}

impl RunOverrides {
    /// `self` with unset fields taken from `base`.
    fn or(&self, base: &RunOverrides) -> RunOverrides {
        RunOverrides {
            style: self.style.or(base.style),
            signal: self.signal.or(base.signal),
            message: self.message.or(base.message),
            backend_config: self.backend_config.clone().or_else(|| base.backend_config.clone()),
            range_m: self.range_m.or(base.range_m),
            latency_s: self.latency_s.or(base.latency_s),
            drop_prob: self.drop_prob.or(base.drop_prob),
            max_message_bytes: self.max_message_bytes.or(base.max_message_bytes),
            decision_tick: self.decision_tick.or(base.decision_tick),
            timeout: self.timeout.or(base.timeout),
        }
    }
}

/// One table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub label: String,
    #[serde(flatten)]
    pub overrides: RunOverrides,
}

/// An experiment matrix: every cell runs every scenario `reps` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub name: String,
    /// Scenario files, relative to the matrix file.
    #[serde(default)]
    pub scenarios: Vec<PathBuf>,
    pub backend_config: PathBuf,
    #[serde(default = "one")]
    pub reps: u32,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the matrix file.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub base: RunOverrides,
    #[serde(default, rename = "cell")]
    pub cells: Vec<CellSpec>,
}

fn one() -> u32 {
    1
}

impl MatrixSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a matrix file; returns it with the directory paths resolve
    /// against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((Self::from_toml(&text)?, base))
    }
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub records: Vec<ResultRecord>,
    pub table: String,
}

/// Seed of one episode. Cells share seeds so rows compare the same
/// channel draws.
pub fn episode_seed(base: u64, scenario: usize, rep: u32) -> u64 {
    base.wrapping_add((scenario as u64).wrapping_mul(7919))
        .wrapping_add(u64::from(rep).wrapping_mul(1_000_003))
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

struct Job {
    cell: usize,
    scenario: usize,
    rep: u32,
}

/// Runs every episode of the matrix. A failing episode yields records
/// with `error` set; the rest of the matrix still runs.
pub fn run_matrix(spec: &MatrixSpec, base_dir: &Path, allow_live: bool) -> Result<MatrixReport, HarnessError> {
    let out = spec.out.as_ref().map(|o| base_dir.join(o));
    let cells: Vec<RunOverrides> = spec.cells.iter().map(|c| c.overrides.or(&spec.base)).collect();
    let backends: Vec<Result<BackendFile, String>> = cells
        .iter()
        .map(|c| {
            let p = base_dir.join(c.backend_config.as_ref().unwrap_or(&spec.backend_config));
            BackendFile::load(&p).map_err(|e| e.to_string())
        })
        .collect();
    let jobs: Vec<Job> = (0..cells.len())
        .flat_map(|cell| {
            (0..spec.scenarios.len()).flat_map(move |scenario| (0..spec.reps).map(move |rep| Job { cell, scenario, rep }))
        })
        .collect();

    let per_job: Vec<Vec<ResultRecord>> = jobs
        .par_iter()
        .map(|job| {
            let o = &cells[job.cell];
            let label = &spec.cells[job.cell].label;
            let scenario = base_dir.join(&spec.scenarios[job.scenario]);
            let mut cfg = RunConfig::new(&scenario, backends[job.cell].clone().unwrap_or_else(|_| BackendFile {
                backends: vec![],
                assignment: crate::m3cot::StageAssignment::uniform(""),
                agents: Default::default(),
            }));
            cfg.seed = episode_seed(spec.seed, job.scenario, job.rep);
            cfg.style = o.style.unwrap_or(cfg.style);
            cfg.signal = o.signal.unwrap_or(cfg.signal);
            cfg.message = o.message.unwrap_or(cfg.message);
            cfg.channel.range_m = o.range_m.unwrap_or(cfg.channel.range_m);
            cfg.channel.latency_s = o.latency_s.unwrap_or(cfg.channel.latency_s);
            cfg.channel.drop_prob = o.drop_prob.unwrap_or(cfg.channel.drop_prob);
            cfg.max_message_bytes = o.max_message_bytes.unwrap_or(cfg.max_message_bytes);
            cfg.decision_tick = o.decision_tick;
            cfg.timeout = o.timeout;
            cfg.allow_live = allow_live;
            let stem = spec.scenarios[job.scenario]
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("scenario{}", job.scenario));
            cfg.out = out
                .as_ref()
                .map(|d| d.join(slug(label)).join(&stem).join(format!("rep{}", job.rep)));
            let run = match &backends[job.cell] {
                Ok(_) => run_episode(&cfg),
                Err(e) => Err(HarnessError::Config(e.clone())),
            };
            match run {
                Ok(r) => r.records(label, job.rep),
                Err(e) => {
                    log::error!("matrix {} cell {label} {stem} rep {}: {e}", spec.name, job.rep);
                    vec![ResultRecord {
                        cell: label.clone(),
                        scenario: stem,
                        style: cfg.style.as_str().into(),
                        signal: cfg.signal.as_str().into(),
                        message: cfg.message.as_str().into(),
                        seed: cfg.seed,
                        rep: job.rep,
                        agent: "".into(),
                        ds: 0.0,
                        rc: 0.0,
                        ip: 0.0,
                        tc: 0.0,
                        episode_tc: 0.0,
                        tb: 0.0,
                        status: crate::world_sim::CavStatus::Failed,
                        error: Some(e.to_string()),
                    }]
                }
            }
        })
        .collect();
    let records: Vec<ResultRecord> = per_job.into_iter().flatten().collect();
    let table = render_table(&spec.name, &summarize(&records));
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let p = dir.join(RunFiles::RESULTS);
        write_results(&records, &p).map_err(|e| HarnessError::io(&p, e))?;
        let t = dir.join("table.txt");
        std::fs::write(&t, &table).map_err(|e| HarnessError::io(&t, e))?;
    }
    Ok(MatrixReport { records, table })
}
