use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use langcoop::backends::BackendFile;
use langcoop::harness::{
    report, run_episode_with_feed, run_matrix, serve_feed, FeedHub, MatrixSpec, RunConfig, RunFiles,
};
use langcoop::langpack::MessageMode;
use langcoop::m3cot::PromptStyle;
use langcoop::signals::Formulation;
use langcoop::world_sim::Vec2;

#[derive(Parser)]
#[command(name = "langcoop", version, about = "Closed-loop cooperative driving with language messages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode.
    Run(Box<RunArgs>),
    /// Run an experiment matrix and print its table.
    Matrix {
        #[arg(long)]
        spec: PathBuf,
        /// Allow live model backends.
        #[arg(long)]
        live: bool,
    },
    /// Print the results table of a run or matrix directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "concise")]
    style: PromptStyle,
    #[arg(long, default_value = "continuous")]
    signal: Formulation,
    #[arg(long, default_value = "image+langpack")]
    message: MessageMode,
    #[arg(long)]
    backend_config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replay the live completions recorded under this run directory.
    #[arg(long, conflicts_with = "live")]
    replay: Option<PathBuf>,
    /// Allow live model backends; completions are recorded under --out.
    #[arg(long)]
    live: bool,
    /// Serve the live feed on this local port.
    #[arg(long)]
    serve: Option<u16>,
    /// Wait for a resume command from the feed before the first tick.
    #[arg(long, requires = "serve")]
    paused: bool,
    /// Wall-clock seconds per simulated second while serving.
    #[arg(long, default_value_t = 1.0)]
    pace: f64,
    /// Default operator sender position, "x,y" in meters.
    #[arg(long, value_parser = parse_point)]
    operator_at: Option<Vec2>,
    /// Deliver operator messages regardless of range.
    #[arg(long)]
    operator_ignore_range: bool,
    #[arg(long)]
    range: Option<f64>,
    #[arg(long)]
    latency: Option<f64>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    decision_tick: Option<f64>,
    #[arg(long)]
    physics_dt: Option<f64>,
    #[arg(long)]
    timeout: Option<f64>,
}

fn parse_point(s: &str) -> Result<Vec2, String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let f = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok(Vec2::new(f(x)?, f(y)?))
}

fn run(a: RunArgs) -> Result<()> {
    let mut backends = BackendFile::load(&a.backend_config)?;
    if let Some(dir) = &a.replay {
        let cache = dir.join(RunFiles::CACHE);
        if !cache.is_dir() {
            bail!("{} holds no recorded completions", dir.display());
        }
        backends = backends.as_replay(&cache);
    }
    let mut cfg = RunConfig::new(&a.scenario, backends);
    cfg.style = a.style;
    cfg.signal = a.signal;
    cfg.message = a.message;
    cfg.seed = a.seed;
    cfg.out = a.out;
    cfg.allow_live = a.live;
    cfg.start_paused = a.paused;
    cfg.pace = a.pace;
    cfg.operator.ignore_range = a.operator_ignore_range;
    if let Some(p) = a.operator_at {
        cfg.operator.position = p;
    }
    cfg.channel.range_m = a.range.unwrap_or(cfg.channel.range_m);
    cfg.channel.latency_s = a.latency.unwrap_or(cfg.channel.latency_s);
    cfg.channel.drop_prob = a.drop_prob.unwrap_or(cfg.channel.drop_prob);
    cfg.decision_tick = a.decision_tick;
    cfg.physics_dt = a.physics_dt;
    cfg.timeout = a.timeout;

    let mut server = None;
    let hub = match a.serve {
        Some(port) => {
            let hub = FeedHub::new();
            let s = serve_feed(hub.clone(), &format!("127.0.0.1:{port}")).context("starting the feed server")?;
            log::info!("feed on ws://{}", s.local_addr());
            server = Some(s);
            Some(hub)
        }
        None => None,
    };
    let result = run_episode_with_feed(&cfg, hub)?;
    drop(server);
    for m in &result.metrics.agents {
        println!(
            "agent {}: DS {:.1}  RC {:.1}  IP {:.3}  TC {:.1} s  TB {:.2} KB  {:?}",
            m.agent, m.ds, m.rc, m.ip, m.tc, m.tb, m.status
        );
    }
    println!("episode TC {:.1} s  TB {:.2} KB", result.metrics.tc, result.metrics.tb);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(a) => run(*a),
        Command::Matrix { spec, live } => {
            let (spec, base) = MatrixSpec::load(&spec)?;
            let rep = run_matrix(&spec, &base, live)?;
            print!("{}", rep.table);
            Ok(())
        }
        Command::Report { input } => {
            print!("{}", report(&input)?);
            Ok(())
        }
    }
}
