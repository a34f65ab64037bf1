//! Closed-loop episodes, experiment matrices, run outputs and the live
//! feed.
//!
//! Per decision tick, for every running CAV: observe, run the reasoning
//! stages, encode and broadcast, poll and fuse, decide and parse. Between
//! ticks the stored driving signal is tracked at the physics rate.

mod episode;
pub mod feed;
mod matrix;
mod output;

use std::path::PathBuf;

use thiserror::Error;

use crate::backends::{BackendError, BackendFile};
use crate::comms::{ChannelConfig, CommsError};
use crate::langpack::{LangPackError, MessageMode, DEFAULT_MAX_BYTES};
use crate::m3cot::PromptStyle;
use crate::signals::Formulation;
use crate::world_sim::{SimError, Vec2};

pub use episode::{run_episode, run_episode_with_feed, run_episode_with_registry, EpisodeResult};
pub use feed::{serve_feed, FeedHub, FeedServer, OperatorCommand, ServerFrame, Target};
pub use matrix::{run_matrix, CellSpec, MatrixReport, MatrixSpec, RunOverrides};
pub use output::{load_run, report, DecisionRecord, Fallback, RunFiles, TrajectoryRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    LangPack(#[from] LangPackError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Where operator messages come from and whether range applies to them.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorConfig {
    /// Default sender position for injections without one.
    pub position: Vec2,
    /// Deliver operator messages to every CAV regardless of range.
    pub ignore_range: bool,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            position: Vec2::new(0.0, 0.0),
            ignore_range: false,
        }
    }
}

/// One episode's configuration. Timing fields left unset come from the
/// scenario file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: PathBuf,
    pub style: PromptStyle,
    pub signal: Formulation,
    pub message: MessageMode,
    pub backends: BackendFile,
    pub channel: ChannelConfig,
    pub seed: u64,
    pub decision_tick: Option<f64>,
    pub physics_dt: Option<f64>,
    pub timeout: Option<f64>,
    /// Run directory for logs; nothing is written when unset.
    pub out: Option<PathBuf>,
    /// Live backends are refused unless set.
    pub allow_live: bool,
    pub max_message_bytes: usize,
    /// Consecutive backend failures after which a CAV is marked failed.
    pub max_backend_failures: u32,
    pub operator: OperatorConfig,
    /// Wait for a resume command before the first tick.
    pub start_paused: bool,
    /// Wall-clock seconds per simulated second while a feed is attached;
    /// zero runs unthrottled.
    pub pace: f64,
}

impl RunConfig {
    /// Defaults: concise reasoning, continuous trajectories, image plus
    /// text messages.
    pub fn new(scenario: impl Into<PathBuf>, backends: BackendFile) -> Self {
        RunConfig {
            scenario: scenario.into(),
            style: PromptStyle::ConciseCot,
            signal: Formulation::Continuous,
            message: MessageMode::ImageLangPack,
            backends,
            channel: ChannelConfig::default(),
            seed: 0,
            decision_tick: None,
            physics_dt: None,
            timeout: None,
            out: None,
            allow_live: false,
            max_message_bytes: DEFAULT_MAX_BYTES,
            max_backend_failures: 10,
            operator: OperatorConfig::default(),
            start_paused: false,
            pace: 0.0,
        }
    }
}
