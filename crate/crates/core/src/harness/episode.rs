use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;

use super::feed::{AgentScore, FeedHub, Inbound, OperatorCommand, RouteInfo, ServerFrame, Target};
use super::output::{write_run, DecisionRecord, Fallback, OperatorRecord, TrajectoryAgent, TrajectoryRecord};
use super::{HarnessError, RunConfig};
use crate::backends::{Registry, TranscriptRecord};
use crate::comms::{Channel, ChannelConfig, ChannelEvent, Reach};
use crate::fusion::{FusedPacket, Fuser};
use crate::langpack::{encode, EncodedMessage, LangPackPacket, MessageMode, Section, SizeBudget};
use crate::m3cot::{run_decision, run_pipeline, CallSite, M3CoTResult, StageError};
use crate::metrics::{finalize, infraction_penalty, AgentOutcome, EpisodeLog, EpisodeMetrics, ResultRecord};
use crate::signals::{
    clamp_control, parse_signal, rollout_continuous, track_discrete, ControlCommand, DiscreteTrajectory,
    DrivingSignal,
};
use crate::world_sim::{
    ego_to_world, make_observation, world_to_ego, CavStatus, FrameRef, InfractionEvent, Observation, Scenario,
    Vec2, VehicleLimits, VehicleState, World,
};
use crate::AgentId;

pub const OPERATOR_ID: &str = "operator";
const JPEG: &str = "image/jpeg";
const PAUSE_POLL: Duration = Duration::from_millis(25);

/// Everything an episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub log: EpisodeLog,
    pub metrics: EpisodeMetrics,
    pub trajectory: Vec<TrajectoryRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub transcripts: Vec<TranscriptRecord>,
    pub operator: Vec<OperatorRecord>,
    pub style: String,
    pub signal: String,
    pub message: String,
    pub seed: u64,
}

impl EpisodeResult {
    /// One results record per agent.
    pub fn records(&self, cell: &str, rep: u32) -> Vec<ResultRecord> {
        self.metrics
            .agents
            .iter()
            .map(|m| ResultRecord {
                cell: cell.to_string(),
                scenario: self.log.scenario.clone(),
                style: self.style.clone(),
                signal: self.signal.clone(),
                message: self.message.clone(),
                seed: self.seed,
                rep,
                agent: m.agent.clone(),
                ds: m.ds,
                rc: m.rc,
                ip: m.ip,
                tc: m.tc,
                episode_tc: self.metrics.tc,
                tb: m.tb,
                status: m.status,
                error: None,
            })
            .collect()
    }

    /// Default row label: style/signal/message.
    pub fn default_cell(&self) -> String {
        format!("{}/{}/{}", self.style, self.signal, self.message)
    }
}

pub fn run_episode(cfg: &RunConfig) -> Result<EpisodeResult, HarnessError> {
    run_episode_with_feed(cfg, None)
}

pub fn run_episode_with_feed(cfg: &RunConfig, hub: Option<Arc<FeedHub>>) -> Result<EpisodeResult, HarnessError> {
    let mut registry = cfg.backends.registry()?;
    if registry.has_live() {
        if !cfg.allow_live {
            return Err(HarnessError::Config(
                "the backend config names live backends; pass the live flag to allow them".into(),
            ));
        }
        let Some(out) = &cfg.out else {
            return Err(HarnessError::Config(
                "live runs must record to an output directory".into(),
            ));
        };
        registry.record_to(out.join(super::RunFiles::CACHE));
    }
    run_episode_with_registry(cfg, registry, hub)
}

/// Runs with a caller-built registry. Its ids must cover the stage
/// assignments in `cfg.backends`.
pub fn run_episode_with_registry(
    cfg: &RunConfig,
    registry: Registry,
    hub: Option<Arc<FeedHub>>,
) -> Result<EpisodeResult, HarnessError> {
    let mut ep = Episode::new(cfg, registry, hub)?;
    ep.run()?;
    ep.finish()
}

/// The signal a CAV is executing.
struct Active {
    signal: DrivingSignal,
    planned_at: f64,
    tick: u64,
    /// Discrete plans in world coordinates, plan-time position first.
    world_path: Vec<Vec2>,
}

#[derive(Default)]
struct AgentRt {
    fuser: Fuser,
    active: Option<Active>,
    failures: u32,
    disengaged: bool,
}

struct Broadcast {
    sender: AgentId,
    mode: MessageMode,
    preview: String,
}

struct Episode<'a> {
    cfg: &'a RunConfig,
    scenario: Scenario,
    world: World,
    channel: Channel,
    registry: Registry,
    agents: BTreeMap<AgentId, AgentRt>,
    limits: BTreeMap<AgentId, VehicleLimits>,
    frame: Option<FrameRef>,
    budget: SizeBudget,
    hub: Option<Arc<FeedHub>>,
    paused: bool,
    deferred: Vec<Inbound>,
    steps_per_tick: u64,
    timeout: f64,
    infractions: Vec<InfractionEvent>,
    channel_log: Vec<ChannelEvent>,
    trajectory: Vec<TrajectoryRecord>,
    decisions: Vec<DecisionRecord>,
    operator: Vec<OperatorRecord>,
    tick_broadcasts: Vec<Broadcast>,
}

fn sanitize(text: &str) -> String {
    let headers: Vec<&str> = Section::LAYOUT.iter().map(|s| s.header()).collect();
    text.replace('\r', "")
        .lines()
        .filter(|l| !headers.contains(&l.trim()))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

fn reasons(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| l.to_ascii_lowercase().starts_with("reason:"))
        .map(str::to_string)
        .collect()
}

/// True when the signal, executed from `state`, slows the car or holds it
/// stopped.
fn signal_brakes(sig: &DrivingSignal, state: &VehicleState) -> bool {
    let v = state.speed;
    match sig {
        DrivingSignal::Control(c) => c.brake > 0.0,
        DrivingSignal::Continuous(t) => t.segments.first().is_none_or(|s| s.speed < v - 1e-3 || s.speed < 0.1),
        DrivingSignal::Discrete(d) => match d.waypoints.first() {
            Some(w) => w.distance() / d.spacing_s < v - 1e-3,
            None => true,
        },
    }
}

impl<'a> Episode<'a> {
    fn new(cfg: &'a RunConfig, registry: Registry, hub: Option<Arc<FeedHub>>) -> Result<Self, HarnessError> {
        let mut scenario = Scenario::load(&cfg.scenario)?;
        if let Some(dt) = cfg.physics_dt {
            scenario.physics_dt = dt;
        }
        if let Some(t) = cfg.decision_tick {
            scenario.decision_tick = t;
        }
        if let Some(t) = cfg.timeout {
            scenario.timeout = t;
        }
        scenario.validate()?;
        if !(cfg.pace >= 0.0 && cfg.pace.is_finite()) {
            return Err(HarnessError::Config(format!("pace {} must be finite and >= 0", cfg.pace)));
        }
        let ratio = scenario.decision_tick / scenario.physics_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(HarnessError::Config(format!(
                "decision tick {} is not a multiple of physics dt {}",
                scenario.decision_tick, scenario.physics_dt
            )));
        }
        for (agent, a) in std::iter::once((None, &cfg.backends.assignment))
            .chain(cfg.backends.agents.iter().map(|(k, v)| (Some(k), v)))
        {
            a.validate(&registry).map_err(|e| match agent {
                Some(k) => HarnessError::Config(format!("assignment for agent {k}: {e}")),
                None => HarnessError::Config(format!("assignment: {e}")),
            })?;
        }
        let frame = match &scenario.frame {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| HarnessError::io(p, e))?;
                Some(FrameRef {
                    label: "front".into(),
                    media_type: JPEG.into(),
                    bytes: Arc::new(bytes),
                })
            }
            None => None,
        };
        if cfg.message.carries_image() && frame.is_none() {
            return Err(HarnessError::Config(format!(
                "message mode {} needs a scenario camera frame",
                cfg.message.as_str()
            )));
        }
        let world = World::new(&scenario)?;
        let channel = Channel::new(ChannelConfig {
            seed: cfg.seed,
            ..cfg.channel
        })?;
        let agents = world.cavs().iter().map(|c| (c.id.clone(), AgentRt::default())).collect();
        let limits = world.cavs().iter().map(|c| (c.id.clone(), c.limits)).collect();
        let steps_per_tick = ratio.round() as u64;
        let timeout = scenario.timeout;
        let paused = cfg.start_paused && hub.is_some();
        Ok(Episode {
            cfg,
            scenario,
            world,
            channel,
            registry,
            agents,
            limits,
            frame,
            budget: SizeBudget::bytes(cfg.max_message_bytes),
            hub,
            paused,
            deferred: Vec::new(),
            steps_per_tick,
            timeout,
            infractions: Vec::new(),
            channel_log: Vec::new(),
            trajectory: Vec::new(),
            decisions: Vec::new(),
            operator: Vec::new(),
            tick_broadcasts: Vec::new(),
        })
    }

    fn finished(&self) -> bool {
        self.world.all_terminal() || self.world.time() >= self.timeout - 1e-9
    }

    fn run(&mut self) -> Result<(), HarnessError> {
        if let Some(hub) = &self.hub {
            hub.publish(&ServerFrame::Hello {
                scenario: self.scenario.name.clone(),
                decision_tick: self.scenario.decision_tick,
                lanes: self.scenario.map.lanes.iter().map(|l| l.polygon.clone()).collect(),
                routes: self
                    .scenario
                    .cavs
                    .iter()
                    .map(|c| RouteInfo {
                        agent: c.id.clone(),
                        waypoints: c.route.waypoints.clone(),
                    })
                    .collect(),
            });
        }
        let mut step: u64 = 0;
        while !self.finished() {
            if step.is_multiple_of(self.steps_per_tick) {
                let tick = step / self.steps_per_tick;
                self.operator_phase(tick)?;
                self.decision_tick(tick)?;
                self.publish_tick(tick);
                if self.hub.is_some() && self.cfg.pace > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(self.scenario.decision_tick * self.cfg.pace));
                }
            }
            let commands = self.commands();
            let events = self.world.step(&commands)?;
            self.infractions.extend(events);
            step += 1;
            self.record_step(step, &commands);
        }
        Ok(())
    }

    fn record_step(&mut self, step: u64, commands: &BTreeMap<AgentId, ControlCommand>) {
        let agents = self
            .world
            .cavs()
            .iter()
            .map(|c| {
                let cmd = match c.status {
                    CavStatus::Running => commands.get(&c.id).copied().unwrap_or(ControlCommand::SAFE_STOP),
                    _ => ControlCommand::IDLE,
                };
                TrajectoryAgent {
                    id: c.id.clone(),
                    x: c.state.position.x,
                    y: c.state.position.y,
                    heading: c.state.heading,
                    speed: c.state.speed,
                    acceleration: c.state.acceleration,
                    status: c.status,
                    progress: c.tracker.progress(),
                    steer: cmd.steer,
                    throttle: cmd.throttle,
                    brake: cmd.brake,
                }
            })
            .collect();
        self.trajectory.push(TrajectoryRecord {
            step,
            time: self.world.time(),
            agents,
        });
    }

    fn running(&self) -> Vec<AgentId> {
        let mut ids: Vec<AgentId> = self
            .world
            .cavs()
            .iter()
            .filter(|c| c.status == CavStatus::Running)
            .map(|c| c.id.clone())
            .collect();
        ids.sort();
        ids
    }

    fn frame_for(&self, agent: &AgentId, tick: u64) -> Option<FrameRef> {
        if let Some(dir) = &self.scenario.frames_dir {
            let p = dir.join(agent.as_str()).join(format!("{tick:05}.jpg"));
            if let Ok(bytes) = std::fs::read(&p) {
                return Some(FrameRef {
                    label: "front".into(),
                    media_type: JPEG.into(),
                    bytes: Arc::new(bytes),
                });
            }
        }
        self.frame.clone()
    }

    fn build_message(&self, obs: &Observation, r: &M3CoTResult) -> Result<Option<EncodedMessage>, HarnessError> {
        let mode = self.cfg.message;
        if mode == MessageMode::None {
            return Ok(None);
        }
        let image = || {
            obs.image
                .as_ref()
                .map(|f| f.bytes.clone())
                .ok_or_else(|| HarnessError::Config("no camera frame for image message".into()))
        };
        if mode == MessageMode::Image {
            return Ok(Some(EncodedMessage::image_only(image()?)?));
        }
        let packet = LangPackPacket {
            agent_id: obs.agent_id.clone(),
            timestamp: obs.sim_time,
            location: obs.ego.position,
            speed: obs.ego.speed,
            acceleration: obs.ego.acceleration,
            scene_desc: sanitize(&r.scene_desc),
            objects_desc: sanitize(&r.objects_desc),
            goal_desc: sanitize(&r.goal_desc),
            intent_desc: sanitize(&r.intent_desc),
        };
        let msg = encode(&packet, &self.budget)?;
        Ok(Some(if mode.carries_image() { msg.with_image(image()?)? } else { msg }))
    }

    fn decision_tick(&mut self, tick: u64) -> Result<(), HarnessError> {
        let now = self.world.time();
        let running = self.running();
        let mut observations: Vec<Observation> = Vec::new();
        for id in &running {
            if self.agents[id].disengaged {
                continue;
            }
            let mut o = make_observation(&self.world, id)?;
            o.image = self.frame_for(id, tick);
            observations.push(o);
        }

        let cfg = self.cfg;
        let registry = &self.registry;
        let limits = &self.limits;
        let site = |id: &AgentId| CallSite {
            registry,
            tick,
            limits: limits[id],
        };
        let stage_results: Vec<Result<M3CoTResult, StageError>> = observations
            .par_iter()
            .map(|o| run_pipeline(o, cfg.backends.assignment_for(&o.agent_id), cfg.style, &site(&o.agent_id)))
            .collect();

        let snap = self.world.snapshot();
        for (o, r) in observations.iter().zip(&stage_results) {
            let Ok(r) = r else { continue };
            if let Some(msg) = self.build_message(o, r)? {
                self.channel.broadcast(&o.agent_id, &msg, &snap)?;
                self.tick_broadcasts.push(Broadcast {
                    sender: o.agent_id.clone(),
                    mode: msg.mode(),
                    preview: r.intent_desc.chars().take(120).collect(),
                });
            }
        }

        // Every running CAV drains its inbox; disengaged ones discard it.
        let mut inputs: BTreeMap<AgentId, (Vec<FusedPacket>, Vec<FrameRef>)> = BTreeMap::new();
        for id in &running {
            let envelopes = self.channel.poll(id, now);
            let Some(o) = observations.iter().find(|o| o.agent_id == *id) else {
                continue;
            };
            let messages: Vec<EncodedMessage> = envelopes.iter().map(|e| e.message.clone()).collect();
            let images: Vec<FrameRef> = envelopes
                .iter()
                .filter_map(|e| {
                    e.message.image().map(|b| FrameRef {
                        label: format!("front view from Agent {}", e.sender_id),
                        media_type: JPEG.into(),
                        bytes: b.clone(),
                    })
                })
                .collect();
            let rt = self.agents.get_mut(id).expect("agent runtime");
            let (fused, errors) = rt.fuser.fuse(&o.ego, now, &messages);
            for e in errors {
                log::warn!("agent {id} tick {tick}: dropped packet: {e}");
            }
            inputs.insert(id.clone(), (fused, images));
        }

        let decisions: Vec<Option<Result<String, crate::backends::BackendError>>> = observations
            .par_iter()
            .zip(&stage_results)
            .map(|(o, r)| {
                let own = r.as_ref().ok()?;
                let (fused, images) = &inputs[&o.agent_id];
                let mut all_images: Vec<FrameRef> = o.image.iter().cloned().collect();
                all_images.extend(images.iter().cloned());
                Some(run_decision(
                    own,
                    fused,
                    o,
                    cfg.signal,
                    cfg.style,
                    &cfg.backends.assignment_for(&o.agent_id).decision,
                    all_images,
                    &site(&o.agent_id),
                ))
            })
            .collect();

        for ((o, stage), decision) in observations.iter().zip(stage_results).zip(decisions) {
            let (fused, _) = &inputs[&o.agent_id];
            let outcome = match (stage, decision) {
                (Err(e), _) => Err(e.to_string()),
                (Ok(_), Some(Err(e))) => Err(e.to_string()),
                (Ok(_), Some(Ok(text))) => Ok(text),
                (Ok(_), None) => unreachable!("decision runs whenever the stages succeed"),
            };
            self.apply_decision(tick, now, o, fused, outcome)?;
        }
        for id in &running {
            if self.agents[id].disengaged {
                self.decisions.push(DecisionRecord {
                    tick,
                    time: now,
                    agent: id.clone(),
                    formulation: cfg.signal,
                    signal: None,
                    braking: true,
                    reasons: vec![],
                    fallback: Some(Fallback::Disengaged),
                    received: vec![],
                    received_intents: vec![],
                });
            }
        }
        Ok(())
    }

    fn apply_decision(
        &mut self,
        tick: u64,
        now: f64,
        obs: &Observation,
        fused: &[FusedPacket],
        outcome: Result<String, String>,
    ) -> Result<(), HarnessError> {
        let id = &obs.agent_id;
        let formulation = self.cfg.signal;
        let max_failures = self.cfg.max_backend_failures;
        let rt = self.agents.get_mut(id).expect("agent runtime");
        let mut reasons_out = Vec::new();
        let fallback = match outcome {
            Ok(text) => {
                rt.failures = 0;
                reasons_out = reasons(&text);
                match parse_signal(&text, formulation) {
                    Ok(signal) => {
                        let world_path = match &signal {
                            DrivingSignal::Discrete(d) => std::iter::once(obs.ego.position)
                                .chain(
                                    d.waypoints
                                        .iter()
                                        .map(|w| ego_to_world(obs.ego.position, obs.ego.heading, *w)),
                                )
                                .collect(),
                            _ => Vec::new(),
                        };
                        rt.active = Some(Active {
                            signal,
                            planned_at: now,
                            tick,
                            world_path,
                        });
                        None
                    }
                    Err(pf) => {
                        rt.active = None;
                        Some(Fallback::ParseFailure { reason: pf.to_string() })
                    }
                }
            }
            Err(error) => {
                rt.failures += 1;
                if rt.failures >= max_failures {
                    rt.active = None;
                    Some(Fallback::Failed { error })
                } else if rt.active.as_ref().is_some_and(|a| a.tick + 1 == tick) {
                    Some(Fallback::HoldLast { error })
                } else {
                    rt.active = None;
                    Some(Fallback::SafeStop { error })
                }
            }
        };
        let signal = rt.active.as_ref().map(|a| a.signal.clone());
        let braking = signal.as_ref().is_none_or(|s| signal_brakes(s, &obs.ego));
        if matches!(fallback, Some(Fallback::Failed { .. })) {
            self.world.fail_agent(id)?;
        }
        self.decisions.push(DecisionRecord {
            tick,
            time: now,
            agent: id.clone(),
            formulation,
            signal,
            braking,
            reasons: reasons_out,
            fallback,
            received: fused.iter().map(|f| f.packet.agent_id.clone()).collect(),
            received_intents: fused.iter().map(|f| f.packet.intent_desc.clone()).collect(),
        });
        Ok(())
    }

    fn commands(&self) -> BTreeMap<AgentId, ControlCommand> {
        let now = self.world.time();
        let mut out = BTreeMap::new();
        for cav in self.world.cavs().iter().filter(|c| c.status == CavStatus::Running) {
            let rt = &self.agents[&cav.id];
            let st = &cav.state;
            let cmd = match (&rt.active, rt.disengaged) {
                (Some(a), false) => match &a.signal {
                    DrivingSignal::Control(c) => clamp_control(c, &cav.limits),
                    DrivingSignal::Continuous(t) => rollout_continuous(t, now - a.planned_at, st, &cav.limits),
                    DrivingSignal::Discrete(d) => {
                        let traj = DiscreteTrajectory {
                            waypoints: a
                                .world_path
                                .iter()
                                .map(|p| world_to_ego(st.position, st.heading, *p))
                                .collect(),
                            spacing_s: d.spacing_s,
                        };
                        track_discrete(&traj, st, &cav.limits)
                    }
                },
                _ => ControlCommand::SAFE_STOP,
            };
            out.insert(cav.id.clone(), cmd);
        }
        out
    }

    fn ack(&mut self, tick: u64, inb: &Inbound, ack: ServerFrame) {
        if let Some(hub) = &self.hub {
            hub.send_to(inb.client, &ack);
        }
        self.operator.push(OperatorRecord {
            tick,
            time: self.world.time(),
            command_id: inb.id.clone(),
            command: inb.command.clone(),
            ack,
        });
    }

    fn operator_phase(&mut self, tick: u64) -> Result<(), HarnessError> {
        let Some(hub) = self.hub.clone() else {
            return Ok(());
        };
        // Re-announce the paused state whenever a client joins.
        let mut announced_to = None;
        loop {
            for inb in hub.drain() {
                self.apply_command(tick, inb)?;
            }
            if !self.paused {
                for inb in std::mem::take(&mut self.deferred) {
                    let delivered = self.inject(&inb)?;
                    log::info!("deferred operator message delivered to {delivered:?}");
                }
                return Ok(());
            }
            let clients = hub.subscriber_count();
            if announced_to != Some(clients) {
                let disengaged = self.disengaged();
                hub.publish(&ServerFrame::snapshot(tick, true, &self.world.snapshot(), &disengaged));
                announced_to = Some(clients);
            }
            hub.wait(PAUSE_POLL);
        }
    }

    fn disengaged(&self) -> Vec<AgentId> {
        self.agents
            .iter()
            .filter(|(_, rt)| rt.disengaged)
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn validate_injection(&self, cmd: &OperatorCommand) -> Result<(), String> {
        let OperatorCommand::Inject { text, position, target } = cmd else {
            return Ok(());
        };
        if text.trim().is_empty() {
            return Err("empty operator message".into());
        }
        if let Some([x, y]) = position {
            if !(x.is_finite() && y.is_finite()) {
                return Err("non-finite position".into());
            }
        }
        if let Target::Agent(a) = target {
            if self.world.cav(a).is_none() {
                return Err(format!("unknown agent {a}"));
            }
        }
        self.operator_message(text, position.map(Vec2::from).unwrap_or(self.cfg.operator.position))
            .map(|_| ())
    }

    fn operator_message(&self, text: &str, position: Vec2) -> Result<EncodedMessage, String> {
        let packet = LangPackPacket {
            agent_id: AgentId::new(OPERATOR_ID),
            timestamp: self.world.time(),
            location: position,
            speed: 0.0,
            acceleration: 0.0,
            scene_desc: String::new(),
            objects_desc: String::new(),
            goal_desc: String::new(),
            intent_desc: text.trim().to_string(),
        };
        encode(&packet, &self.budget).map_err(|e| e.to_string())
    }

    /// Sends an injection; returns the receivers.
    fn inject(&mut self, inb: &Inbound) -> Result<Vec<AgentId>, HarnessError> {
        let OperatorCommand::Inject { text, position, target } = &inb.command else {
            return Ok(vec![]);
        };
        let position = position.map(Vec2::from).unwrap_or(self.cfg.operator.position);
        let msg = self.operator_message(text, position).map_err(HarnessError::Config)?;
        let reach = Reach {
            target: match target {
                Target::Broadcast => None,
                Target::Agent(a) => Some(a.clone()),
            },
            ignore_range: self.cfg.operator.ignore_range,
        };
        let snap = self.world.snapshot();
        let env = self
            .channel
            .send_from(&AgentId::new(OPERATOR_ID), position, &msg, &snap, reach);
        self.tick_broadcasts.push(Broadcast {
            sender: AgentId::new(OPERATOR_ID),
            mode: msg.mode(),
            preview: text.chars().take(120).collect(),
        });
        Ok(env.into_iter().map(|e| e.receiver_id).collect())
    }

    fn apply_command(&mut self, tick: u64, inb: Inbound) -> Result<(), HarnessError> {
        let ok = |delivered_to: Vec<AgentId>, deferred: bool| ServerFrame::Ack {
            command_id: inb.id.clone(),
            ok: true,
            reason: None,
            delivered_to,
            deferred,
        };
        let reject = |reason: String| ServerFrame::Ack {
            command_id: inb.id.clone(),
            ok: false,
            reason: Some(reason),
            delivered_to: vec![],
            deferred: false,
        };
        let ack = match &inb.command {
            OperatorCommand::Pause => {
                self.paused = true;
                ok(vec![], false)
            }
            OperatorCommand::Resume { agent: None } => {
                self.paused = false;
                ok(vec![], false)
            }
            OperatorCommand::Resume { agent: Some(a) } | OperatorCommand::Disengage { agent: a } => {
                let engage = matches!(inb.command, OperatorCommand::Resume { .. });
                match self.agents.get_mut(a) {
                    Some(rt) => {
                        rt.disengaged = !engage;
                        if !engage {
                            rt.active = None;
                        }
                        ok(vec![], false)
                    }
                    None => reject(format!("unknown agent {a}")),
                }
            }
            OperatorCommand::Inject { .. } => match self.validate_injection(&inb.command) {
                Err(reason) => reject(reason),
                Ok(()) if self.paused => {
                    self.deferred.push(inb.clone());
                    ok(vec![], true)
                }
                Ok(()) => {
                    let delivered = self.inject(&inb)?;
                    ok(delivered, false)
                }
            },
        };
        self.ack(tick, &inb, ack);
        Ok(())
    }

    fn publish_tick(&mut self, tick: u64) {
        let events = self.channel.drain_events();
        if let Some(hub) = &self.hub {
            let snap = self.world.snapshot();
            hub.publish(&ServerFrame::snapshot(tick, self.paused, &snap, &self.disengaged()));
            for e in &events {
                let b = self.tick_broadcasts.iter().rev().find(|b| b.sender == e.sender);
                hub.publish(&ServerFrame::MessageEvent {
                    tick,
                    time: e.sent_at,
                    sender: e.sender.clone(),
                    receiver: e.receiver.clone(),
                    size_bytes: e.size_bytes,
                    kb: e.size_bytes as f64 / 1024.0,
                    mode: b.map_or("unknown", |b| b.mode.as_str()).to_string(),
                    dropped: e.dropped,
                    preview: b.map(|b| b.preview.clone()).unwrap_or_default(),
                });
            }
            let agents = self
                .world
                .cavs()
                .iter()
                .map(|c| {
                    let ev: Vec<InfractionEvent> =
                        self.infractions.iter().filter(|e| e.agent_id == c.id).cloned().collect();
                    let rc = c.tracker.progress();
                    let ip = infraction_penalty(&ev);
                    AgentScore {
                        id: c.id.clone(),
                        rc,
                        ip,
                        ds: rc * (1.0 - ip),
                    }
                })
                .collect();
            hub.publish(&ServerFrame::MetricsUpdate {
                tick,
                time: snap.time,
                agents,
            });
        }
        self.channel_log.extend(events);
        self.tick_broadcasts.clear();
    }

    fn finish(mut self) -> Result<EpisodeResult, HarnessError> {
        self.channel_log.extend(self.channel.drain_events());
        let log = EpisodeLog {
            scenario: self.scenario.name.clone(),
            end_time: self.world.time(),
            timed_out: !self.world.all_terminal(),
            agents: self
                .world
                .cavs()
                .iter()
                .map(|c| AgentOutcome {
                    id: c.id.clone(),
                    progress: c.tracker.progress() / 100.0,
                    status: c.status,
                    finished_at: c.finished_at,
                })
                .collect(),
            infractions: std::mem::take(&mut self.infractions),
            channel: std::mem::take(&mut self.channel_log),
        };
        let metrics = finalize(&log);
        let result = EpisodeResult {
            log,
            metrics,
            trajectory: std::mem::take(&mut self.trajectory),
            decisions: std::mem::take(&mut self.decisions),
            transcripts: self.registry.transcripts().drain(),
            operator: std::mem::take(&mut self.operator),
            style: self.cfg.style.as_str().into(),
            signal: self.cfg.signal.as_str().into(),
            message: self.cfg.message.as_str().into(),
            seed: self.cfg.seed,
        };
        if let Some(dir) = &self.cfg.out {
            write_run(
                dir,
                &result.trajectory,
                &result.log.channel,
                &result.decisions,
                &result.transcripts,
                &result.operator,
                &result.log,
                &result.metrics,
                &result.records(&result.default_cell(), 0),
            )?;
        }
        Ok(result)
    }
}
