use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::geometry::{point_in_polygon, segments_intersect, Obb, Vec2};
use super::scenario::{ActorKind, LightState, MapSpec};
use super::{CavStatus, SimError, WorldSnapshot};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionStatic,
    RedLight,
    LaneInvasion,
}

impl InfractionKind {
    pub fn is_collision(self) -> bool {
        matches!(
            self,
            InfractionKind::CollisionPedestrian
                | InfractionKind::CollisionVehicle
                | InfractionKind::CollisionStatic
        )
    }
}

/// Penalty factor per infraction kind, each in (0, 1]. Penalties compose
/// multiplicatively.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Coefficients {
    pub collision_pedestrian: f64,
    pub collision_vehicle: f64,
    pub collision_static: f64,
    pub red_light: f64,
    pub lane_invasion: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            collision_pedestrian: 0.50,
            collision_vehicle: 0.60,
            collision_static: 0.65,
            red_light: 0.70,
            lane_invasion: 0.90,
        }
    }
}

impl Coefficients {
    pub fn for_kind(&self, kind: InfractionKind) -> f64 {
        match kind {
            InfractionKind::CollisionPedestrian => self.collision_pedestrian,
            InfractionKind::CollisionVehicle => self.collision_vehicle,
            InfractionKind::CollisionStatic => self.collision_static,
            InfractionKind::RedLight => self.red_light,
            InfractionKind::LaneInvasion => self.lane_invasion,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all = [
            self.collision_pedestrian,
            self.collision_vehicle,
            self.collision_static,
            self.red_light,
            self.lane_invasion,
        ];
        if all.iter().all(|c| *c > 0.0 && *c <= 1.0) {
            Ok(())
        } else {
            Err(SimError::Scenario("infraction coefficients must be in (0, 1]".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub coefficient: f64,
    pub timestamp: f64,
    pub agent_id: AgentId,
    /// What was hit or violated: an actor id, a CAV id, a light id or a lane.
    pub other: String,
}

/// Turns world snapshots into infraction events, reporting each contact
/// episode (a contiguous run of steps in violation) once.
#[derive(Debug, Clone)]
pub struct InfractionMonitor {
    coefficients: Coefficients,
    contacts: BTreeSet<(AgentId, String)>,
    off_lane: BTreeSet<AgentId>,
    last_position: BTreeMap<AgentId, Vec2>,
}

impl InfractionMonitor {
    pub fn new(coefficients: Coefficients) -> Self {
        InfractionMonitor {
            coefficients,
            contacts: BTreeSet::new(),
            off_lane: BTreeSet::new(),
            last_position: BTreeMap::new(),
        }
    }

    fn event(&self, kind: InfractionKind, t: f64, agent: &AgentId, other: String) -> InfractionEvent {
        InfractionEvent {
            kind,
            coefficient: self.coefficients.for_kind(kind),
            timestamp: t,
            agent_id: agent.clone(),
            other,
        }
    }

    /// Infractions starting at this snapshot. Only running CAVs are charged;
    /// crashed CAVs still count as obstacles, completed ones have left.
    pub fn detect(&mut self, snap: &WorldSnapshot, map: &MapSpec) -> Vec<InfractionEvent> {
        let mut events = Vec::new();
        let mut touching = BTreeSet::new();

        for cav in snap.cavs.iter().filter(|c| c.status == CavStatus::Running) {
            let me = Obb::new(cav.state.position, cav.state.heading, cav.footprint);

            for other in snap.cavs.iter() {
                if other.id == cav.id || other.status == CavStatus::Completed {
                    continue;
                }
                let ob = Obb::new(other.state.position, other.state.heading, other.footprint);
                if me.overlaps(&ob) {
                    touching.insert((cav.id.clone(), format!("cav:{}", other.id)));
                }
            }
            for actor in &snap.actors {
                let ob = Obb::new(actor.position, actor.heading, actor.footprint);
                if me.overlaps(&ob) {
                    touching.insert((cav.id.clone(), format!("actor:{}", actor.id)));
                }
            }

            if !map.lanes.is_empty() {
                let inside = map
                    .lanes
                    .iter()
                    .any(|l| point_in_polygon(cav.state.position, &l.polygon));
                if inside {
                    self.off_lane.remove(&cav.id);
                } else if self.off_lane.insert(cav.id.clone()) {
                    events.push(self.event(
                        InfractionKind::LaneInvasion,
                        snap.time,
                        &cav.id,
                        "lane".into(),
                    ));
                }
            }

            if let Some(prev) = self.last_position.get(&cav.id).copied() {
                let now = cav.state.position;
                for light in &snap.lights {
                    if light.state != LightState::Red {
                        continue;
                    }
                    let dir = Vec2::from_heading(light.heading);
                    if (now - prev).dot(dir) <= 0.0 {
                        continue;
                    }
                    if segments_intersect(prev, now, light.stop_line[0], light.stop_line[1]) {
                        events.push(self.event(
                            InfractionKind::RedLight,
                            snap.time,
                            &cav.id,
                            light.id.clone(),
                        ));
                    }
                }
            }
            self.last_position.insert(cav.id.clone(), cav.state.position);
        }

        for key in &touching {
            if self.contacts.contains(key) {
                continue;
            }
            let (agent, other) = key;
            let kind = if let Some(actor_id) = other.strip_prefix("actor:") {
                match snap.actors.iter().find(|a| a.id == actor_id).map(|a| a.kind) {
                    Some(ActorKind::Pedestrian) => InfractionKind::CollisionPedestrian,
                    Some(ActorKind::Static) => InfractionKind::CollisionStatic,
                    _ => InfractionKind::CollisionVehicle,
                }
            } else {
                InfractionKind::CollisionVehicle
            };
            let id = other.split_once(':').map(|(_, id)| id).unwrap_or(other);
            events.push(self.event(kind, snap.time, agent, id.to_string()));
        }
        self.contacts = touching;
        events
    }
}
