//! A scripted backend whose decision completions are corrupted at random.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex, OnceLock};

use langcoop::backends::{Backend, BackendError, Completion, CompletionRequest, Purpose, Registry, ScriptedBackend};
use langcoop::langpack::MessageMode;
use langcoop::harness::{run_episode_with_registry, EpisodeResult, Fallback, RunConfig};
use langcoop::signals::{parse_signal, ControlCommand, Formulation};
use langcoop::world_sim::CavStatus;
use langcoop::AgentId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

const JUNK: &[char] = &[
    'a', 'Q', 'z', ' ', '\n', '\t', ',', '.', '-', '+', 'e', 'E', '/', '\\', '"', '\'', '{', '}', '[', ']', '<', '>',
    '|', '#', '*', '\u{0}', '\u{7f}', 'é', 'ß', '漢', '字', '\u{200b}', '\u{feff}', '🚗', '→', 'ø', '∞', '½',
];

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap())
}

/// Damages `text` so that no signal block of `f` survives. Every family
/// removes the digits, the tuple delimiters, or the signal itself.
pub fn corrupt(text: &str, f: Formulation, rng: &mut ChaCha8Rng) -> String {
    let mut s = text.to_string();
    for _ in 0..rng.gen_range(1..=3) {
        s = match rng.gen_range(0..5) {
            0 => s
                .chars()
                .map(|c| if c.is_ascii_digit() { rng.gen_range(b'a'..=b'j') as char } else { c })
                .collect(),
            1 => s
                .chars()
                .filter_map(|c| match c {
                    '(' | ')' | ':' | '=' => {
                        if rng.gen_bool(0.5) {
                            None
                        } else {
                            Some(JUNK[rng.gen_range(0..JUNK.len())])
                        }
                    }
                    c => Some(c),
                })
                .collect(),
            2 => {
                let lower = s.to_lowercase();
                let key = match f {
                    Formulation::Control => "steer",
                    _ => "(",
                };
                // Lowercasing can change byte offsets for non-ASCII text.
                let cut = lower.find(key).filter(|_| lower.len() == s.len()).unwrap_or(0);
                let mut t: String = s[..cut].to_string();
                for _ in 0..rng.gen_range(0..40) {
                    t.push(JUNK[rng.gen_range(0..JUNK.len())]);
                }
                t
            }
            3 => (0..rng.gen_range(0..400)).map(|_| JUNK[rng.gen_range(0..JUNK.len())]).collect(),
            _ => {
                number_re().replace_all(&s, |_: &regex::Captures| {
                    ["1e999", "-1e999", "NaN", "inf", "-inf"][rng.gen_range(0..5)].to_string()
                })
                .into_owned()
            }
        };
    }
    s
}

/// Corrupts about half the decision completions of a scripted policy.
pub struct Fuzzer {
    inner: ScriptedBackend,
    salt: u64,
    /// (tick, agent) of every corrupted decision.
    pub corrupted: Mutex<BTreeSet<(u64, AgentId)>>,
    /// Corrupted completions that still parsed. Must stay empty.
    pub survivors: Mutex<Vec<String>>,
}

impl Fuzzer {
    pub fn new(salt: u64) -> Self {
        Fuzzer {
            inner: ScriptedBackend::new("rules", "follow_route").unwrap(),
            salt,
            corrupted: Mutex::new(BTreeSet::new()),
            survivors: Mutex::new(Vec::new()),
        }
    }

    fn rng(&self, req: &CompletionRequest) -> ChaCha8Rng {
        // Seeded per call site so parallel agents stay deterministic.
        let h = Sha256::digest(format!("{}/{}/{}", self.salt, req.tick, req.agent.as_str()));
        ChaCha8Rng::from_seed(h.into())
    }
}

impl Backend for Fuzzer {
    fn id(&self) -> &str {
        "rules"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let mut c = self.inner.complete(req)?;
        if let Purpose::Decision(f) = req.purpose {
            let mut rng = self.rng(req);
            if rng.gen_bool(0.5) {
                c.text = corrupt(&c.text, f, &mut rng);
                if parse_signal(&c.text, f).is_ok() {
                    self.survivors.lock().unwrap().push(c.text.clone());
                }
                self.corrupted.lock().unwrap().insert((req.tick, req.agent.clone()));
            }
        }
        Ok(c)
    }
}

/// Outcome of one fuzzed episode.
pub struct FuzzRun {
    pub result: EpisodeResult,
    pub corrupted: BTreeSet<(u64, AgentId)>,
    pub survivors: Vec<String>,
}

pub fn run_fuzzed(cfg: &RunConfig, salt: u64) -> FuzzRun {
    let fuzz = Arc::new(Fuzzer::new(salt));
    let registry = Registry::new().with(fuzz.clone());
    let result = run_episode_with_registry(cfg, registry, None).unwrap();
    let corrupted = fuzz.corrupted.lock().unwrap().clone();
    let survivors = fuzz.survivors.lock().unwrap().clone();
    FuzzRun {
        result,
        corrupted,
        survivors,
    }
}

/// Checks one fuzzed run. Returns the number of corrupted completions
/// handled correctly, or the first violation.
pub fn check(run: &FuzzRun, steps_per_tick: u64) -> Result<usize, String> {
    if !run.survivors.is_empty() {
        return Err(format!("corruption left a parsable signal: {:?}", run.survivors[0]));
    }
    let r = &run.result;
    for d in &r.decisions {
        let hit = run.corrupted.contains(&(d.tick, d.agent.clone()));
        let pf = matches!(d.fallback, Some(Fallback::ParseFailure { .. }));
        if hit != pf {
            return Err(format!("tick {} agent {}: corrupted {hit}, fallback {:?}", d.tick, d.agent, d.fallback));
        }
        if pf && d.signal.is_some() {
            return Err(format!("tick {} agent {}: a signal was kept after a parse failure", d.tick, d.agent));
        }
    }
    // Every step of a failed tick executes the safe stop.
    for t in &r.trajectory {
        let tick = (t.step - 1) / steps_per_tick;
        for a in &t.agents {
            if a.status != CavStatus::Running || !run.corrupted.contains(&(tick, a.id.clone())) {
                continue;
            }
            let cmd = ControlCommand {
                steer: a.steer,
                throttle: a.throttle,
                brake: a.brake,
            };
            if cmd != ControlCommand::SAFE_STOP {
                return Err(format!("step {} agent {}: {cmd:?} after a parse failure", t.step, a.id));
            }
        }
    }
    // Decisions keep coming after failures: each agent decides on every
    // tick until it leaves the run.
    for out in &r.log.agents {
        let ticks: Vec<u64> = r.decisions.iter().filter(|d| d.agent == out.id).map(|d| d.tick).collect();
        if ticks.iter().enumerate().any(|(i, &t)| t != i as u64) {
            return Err(format!("agent {} skipped decision ticks: {ticks:?}", out.id));
        }
    }
    let last_tick = r.trajectory.last().map(|t| (t.step - 1) / steps_per_tick).unwrap_or(0);
    if run.corrupted.iter().any(|(t, _)| *t > last_tick) {
        return Err("corruption recorded past the end of the run".into());
    }
    Ok(run.corrupted.len())
}

pub const SCENARIOS: &[&str] = &[
    "straight_pair",
    "intent_propagation",
    "red_light_queue",
    "intersection_left_turn",
    "intersection_right_turn",
    "merge_on_ramp",
    "parked_obstacle",
    "occluded_pedestrian",
    "cyclist_follow",
    "curve_oncoming",
];

/// Fuzzed episodes over every scenario and formulation until at least
/// `min` corrupted completions were handled. Returns (corrupted, episodes).
pub fn sweep(min: usize) -> Result<(usize, usize), String> {
    let mut total = 0;
    let mut episodes = 0;
    let formulations = Formulation::ALL;
    while total < min {
        let name = SCENARIOS[episodes % SCENARIOS.len()];
        let mut cfg = super::config(name);
        cfg.signal = formulations[(episodes / SCENARIOS.len()) % formulations.len()];
        cfg.message = MessageMode::LangPack;
        cfg.decision_tick = Some(1.0);
        cfg.physics_dt = Some(0.05);
        cfg.seed = episodes as u64;
        let run = run_fuzzed(&cfg, episodes as u64);
        total += check(&run, 20).map_err(|e| format!("{name} {:?}: {e}", cfg.signal))?;
        episodes += 1;
        if episodes > 10 * SCENARIOS.len() * formulations.len() {
            return Err(format!("only {total} corrupted completions after {episodes} episodes"));
        }
    }
    Ok((total, episodes))
}
