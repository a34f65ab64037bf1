//! Deterministic 2D kinematic world standing in for a full driving simulator.
//!
//! CAVs follow the kinematic bicycle model, scripted actors replay their
//! paths, traffic lights follow phase timelines. Each physics step produces
//! infraction events and updates monotone route progress.

mod geometry;
mod infractions;
mod observation;
mod route;
mod scenario;
mod vehicle;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{
    ego_to_world, normalize_angle, point_in_polygon, segments_intersect, world_to_ego, EgoPoint,
    Footprint, Obb, Vec2,
};
pub use infractions::{Coefficients, InfractionEvent, InfractionKind, InfractionMonitor};
pub use observation::{
    make_observation, FrameRef, MotionTag, NearbyObject, ObjectClass, Observation,
};
pub use route::{route_progress, RouteSpec, RouteTracker};
pub use scenario::{
    ActorKind, ActorSpec, CavSpec, LaneSpec, LightPhase, LightSpec, LightState, MapSpec,
    Scenario, SensingConfig, StartPose,
};
pub use vehicle::{step_vehicle, VehicleLimits, VehicleState};

use crate::signals::ControlCommand;
use crate::AgentId;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite value in vehicle state or command")]
    NonFinite,
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("invalid vehicle limits: {0}")]
    InvalidLimits(&'static str),
    #[error("invalid route: {0}")]
    InvalidRoute(&'static str),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("scenario: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavStatus {
    Running,
    /// Reached its goal and left the road.
    Completed,
    /// Collided; stays in place as an obstacle.
    Crashed,
    /// Stood still without progress for the stuck timeout.
    Stuck,
    /// Its reasoning backend failed beyond the fallback policy.
    Failed,
}

impl CavStatus {
    pub fn is_terminal(self) -> bool {
        self != CavStatus::Running
    }
}

#[derive(Debug, Clone)]
pub struct Cav {
    pub id: AgentId,
    pub state: VehicleState,
    pub limits: VehicleLimits,
    pub footprint: Footprint,
    pub speed_limit: f64,
    pub tracker: RouteTracker,
    pub status: CavStatus,
    /// Time the CAV reached a terminal status.
    pub finished_at: Option<f64>,
    last_progress_at: f64,
    last_progress: f64,
}

#[derive(Debug, Clone)]
struct Actor {
    spec: ActorSpec,
    arc: f64,
    speed: f64,
    gone: bool,
    path_len: f64,
}

impl Actor {
    fn new(spec: ActorSpec) -> Self {
        let path_len = spec.path.windows(2).map(|w| w[0].distance(w[1])).sum();
        Actor {
            spec,
            arc: 0.0,
            speed: 0.0,
            gone: false,
            path_len,
        }
    }

    fn pose(&self) -> (Vec2, f64) {
        let p = &self.spec.path;
        if p.len() == 1 {
            return (p[0], self.spec.heading_deg.to_radians());
        }
        let mut left = self.arc;
        let last = p.len() - 2;
        for (i, w) in p.windows(2).enumerate() {
            let seg = w[0].distance(w[1]);
            let heading = (w[1].y - w[0].y).atan2(w[1].x - w[0].x);
            if left <= seg || i == last {
                let t = if seg > 0.0 { (left / seg).min(1.0) } else { 0.0 };
                return (w[0] + (w[1] - w[0]) * t, heading);
            }
            left -= seg;
        }
        unreachable!("path has at least two points")
    }

    fn advance(&mut self, t_end: f64, dt: f64) {
        if self.gone || self.spec.path.len() < 2 {
            return;
        }
        let v0 = self.spec.speed_at(t_end - dt);
        let v1 = self.spec.speed_at(t_end);
        self.arc = (self.arc + 0.5 * (v0 + v1) * dt).min(self.path_len);
        self.speed = if self.arc >= self.path_len { 0.0 } else { v1 };
        if self.arc >= self.path_len && self.spec.despawn_at_end {
            self.gone = true;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CavSnapshot {
    pub id: AgentId,
    pub state: VehicleState,
    pub footprint: Footprint,
    pub status: CavStatus,
    /// Route completion, percent.
    pub progress: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActorSnapshot {
    pub id: String,
    pub kind: ActorKind,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub footprint: Footprint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LightSnapshot {
    pub id: String,
    pub state: LightState,
    pub stop_line: [Vec2; 2],
    pub heading: f64,
}

/// Immutable copy of the world at one instant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub time: f64,
    pub cavs: Vec<CavSnapshot>,
    pub actors: Vec<ActorSnapshot>,
    pub lights: Vec<LightSnapshot>,
}

impl WorldSnapshot {
    pub fn cav(&self, id: &AgentId) -> Option<&CavSnapshot> {
        self.cavs.iter().find(|c| c.id == *id)
    }
}

/// Detects every infraction starting in `snap`, given the contact history in `monitor`.
pub fn detect_infractions(
    monitor: &mut InfractionMonitor,
    snap: &WorldSnapshot,
    map: &MapSpec,
) -> Vec<InfractionEvent> {
    monitor.detect(snap, map)
}

pub struct World {
    map: Arc<MapSpec>,
    lights: Vec<LightSpec>,
    cavs: Vec<Cav>,
    actors: Vec<Actor>,
    monitor: InfractionMonitor,
    sensing: SensingConfig,
    stuck_timeout: f64,
    dt: f64,
    step: u64,
}

impl World {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let cavs = scenario
            .cavs
            .iter()
            .map(|c| {
                let state = VehicleState::at(
                    Vec2::new(c.start.x, c.start.y),
                    c.start.heading_deg.to_radians(),
                    c.start.speed,
                );
                let mut tracker = RouteTracker::new(c.route.clone());
                let p = tracker.update(state.position);
                Cav {
                    id: c.id.clone(),
                    state,
                    limits: c.limits,
                    footprint: c.footprint,
                    speed_limit: c.speed_limit,
                    tracker,
                    status: CavStatus::Running,
                    finished_at: None,
                    last_progress_at: 0.0,
                    last_progress: p,
                }
            })
            .collect();
        Ok(World {
            map: Arc::new(scenario.map.clone()),
            lights: scenario.lights.clone(),
            cavs,
            actors: scenario.actors.iter().cloned().map(Actor::new).collect(),
            monitor: InfractionMonitor::new(scenario.coefficients),
            sensing: scenario.sensing,
            stuck_timeout: scenario.stuck_timeout,
            dt: scenario.physics_dt,
            step: 0,
        })
    }

    /// Overrides the physics step; the step counter must still be zero.
    pub fn set_physics_dt(&mut self, dt: f64) -> Result<(), SimError> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(SimError::InvalidStep(dt));
        }
        self.dt = dt;
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn physics_dt(&self) -> f64 {
        self.dt
    }

    pub fn map(&self) -> &Arc<MapSpec> {
        &self.map
    }

    pub fn sensing(&self) -> SensingConfig {
        self.sensing
    }

    pub fn cavs(&self) -> &[Cav] {
        &self.cavs
    }

    pub fn cav(&self, id: &AgentId) -> Option<&Cav> {
        self.cavs.iter().find(|c| c.id == *id)
    }

    pub fn all_terminal(&self) -> bool {
        self.cavs.iter().all(|c| c.status.is_terminal())
    }

    fn actor_snapshots(&self) -> Vec<ActorSnapshot> {
        self.actors
            .iter()
            .filter(|a| !a.gone)
            .map(|a| {
                let (position, heading) = a.pose();
                ActorSnapshot {
                    id: a.spec.id.clone(),
                    kind: a.spec.kind,
                    position,
                    heading,
                    speed: a.speed,
                    footprint: a.spec.footprint(),
                }
            })
            .collect()
    }

    fn light_snapshots(&self) -> Vec<LightSnapshot> {
        let t = self.time();
        self.lights
            .iter()
            .map(|l| LightSnapshot {
                id: l.id.clone(),
                state: l.state_at(t),
                stop_line: l.stop_line,
                heading: l.heading(),
            })
            .collect()
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            time: self.time(),
            cavs: self
                .cavs
                .iter()
                .map(|c| CavSnapshot {
                    id: c.id.clone(),
                    state: c.state,
                    footprint: c.footprint,
                    status: c.status,
                    progress: c.tracker.progress(),
                })
                .collect(),
            actors: self.actor_snapshots(),
            lights: self.light_snapshots(),
        }
    }

    /// Marks a CAV terminally failed at the current time.
    pub fn fail_agent(&mut self, id: &AgentId) -> Result<(), SimError> {
        let t = self.time();
        let cav = self
            .cavs
            .iter_mut()
            .find(|c| c.id == *id)
            .ok_or_else(|| SimError::UnknownAgent(id.clone()))?;
        if cav.status == CavStatus::Running {
            cav.status = CavStatus::Failed;
            cav.finished_at = Some(t);
        }
        Ok(())
    }

    /// Advances the world by one physics step. Running CAVs without a
    /// command in `commands` get the safe-stop command.
    pub fn step(
        &mut self,
        commands: &BTreeMap<AgentId, ControlCommand>,
    ) -> Result<Vec<InfractionEvent>, SimError> {
        let dt = self.dt;
        let t_next = (self.step + 1) as f64 * dt;
        for cav in self.cavs.iter_mut() {
            match cav.status {
                CavStatus::Running => {
                    let cmd = commands
                        .get(&cav.id)
                        .copied()
                        .unwrap_or(ControlCommand::SAFE_STOP);
                    let mut next = step_vehicle(&cav.state, &cmd, dt, &cav.limits)?;
                    next.timestamp = t_next;
                    cav.state = next;
                }
                _ => {
                    cav.state.speed = 0.0;
                    cav.state.acceleration = 0.0;
                    cav.state.timestamp = t_next;
                }
            }
        }
        for a in self.actors.iter_mut() {
            a.advance(t_next, dt);
        }
        self.step += 1;

        let snap = self.snapshot();
        let events = self.monitor.detect(&snap, &self.map);
        for cav in self.cavs.iter_mut() {
            if cav.status != CavStatus::Running {
                continue;
            }
            if events
                .iter()
                .any(|e| e.agent_id == cav.id && e.kind.is_collision())
            {
                cav.status = CavStatus::Crashed;
                cav.finished_at = Some(t_next);
                cav.state.speed = 0.0;
                continue;
            }
            let p = cav.tracker.update(cav.state.position);
            if cav.tracker.is_complete() {
                cav.status = CavStatus::Completed;
                cav.finished_at = Some(t_next);
                continue;
            }
            if p > cav.last_progress + 1e-6 || cav.state.speed > 0.1 {
                cav.last_progress = cav.last_progress.max(p);
                cav.last_progress_at = t_next;
            } else if t_next - cav.last_progress_at >= self.stuck_timeout {
                cav.status = CavStatus::Stuck;
                cav.finished_at = Some(t_next);
            }
        }
        Ok(events)
    }
}

#[cfg(test)]
mod tests;
