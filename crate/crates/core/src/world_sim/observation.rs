use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::geometry::{normalize_angle, world_to_ego, EgoPoint, Obb, Vec2};
use super::scenario::{ActorKind, LightState};
use super::vehicle::VehicleState;
use super::{CavStatus, SimError, World};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    Cyclist,
    Static,
    TrafficLight,
}

impl ObjectClass {
    pub fn label(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
            ObjectClass::Static => "static obstacle",
            ObjectClass::TrafficLight => "traffic light",
        }
    }
}

impl From<ActorKind> for ObjectClass {
    fn from(k: ActorKind) -> Self {
        match k {
            ActorKind::Vehicle => ObjectClass::Vehicle,
            ActorKind::Pedestrian => ObjectClass::Pedestrian,
            ActorKind::Cyclist => ObjectClass::Cyclist,
            ActorKind::Static => ObjectClass::Static,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionTag {
    Stationary,
    SameDirection,
    Oncoming,
    Crossing,
}

impl MotionTag {
    pub fn label(self) -> &'static str {
        match self {
            MotionTag::Stationary => "stationary",
            MotionTag::SameDirection => "moving in the same direction",
            MotionTag::Oncoming => "oncoming",
            MotionTag::Crossing => "crossing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearbyObject {
    pub id: String,
    pub class: ObjectClass,
    /// Center of the object, or of the stop line for traffic lights.
    pub relative: EgoPoint,
    pub range: f64,
    /// Longitudinal speed of the object relative to ego; negative is closing.
    pub relative_speed: f64,
    pub motion: MotionTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light: Option<LightState>,
    /// Object length along its heading, meters.
    pub length: f64,
}

/// Camera frame handed to vision backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub label: String,
    pub media_type: String,
    #[serde(skip)]
    pub bytes: Arc<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_id: AgentId,
    pub ego: VehicleState,
    /// Sorted by range, nearest first.
    pub nearby_objects: Vec<NearbyObject>,
    pub goal_offset: EgoPoint,
    /// True when the navigation goal is the route's final waypoint.
    pub goal_is_endpoint: bool,
    pub speed_limit: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<FrameRef>,
    pub sim_time: f64,
}

struct Candidate {
    id: String,
    class: ObjectClass,
    position: Vec2,
    heading: f64,
    speed: f64,
    length: f64,
    light: Option<LightState>,
    occluder: Option<Obb>,
}

fn motion_tag(speed: f64, heading: f64, ego_heading: f64) -> MotionTag {
    if speed < 0.2 {
        return MotionTag::Stationary;
    }
    let d = normalize_angle(heading - ego_heading).abs();
    if d < std::f64::consts::FRAC_PI_4 {
        MotionTag::SameDirection
    } else if d > 3.0 * std::f64::consts::FRAC_PI_4 {
        MotionTag::Oncoming
    } else {
        MotionTag::Crossing
    }
}

/// What `agent_id` would perceive right now: objects inside its sensing
/// range and camera field of view with a clear line of sight, plus the
/// relative position of its next navigation goal.
pub fn make_observation(world: &World, agent_id: &AgentId) -> Result<Observation, SimError> {
    let ego = world
        .cav(agent_id)
        .ok_or_else(|| SimError::UnknownAgent(agent_id.clone()))?;
    let st = ego.state;
    let sensing = world.sensing();

    let mut candidates: Vec<Candidate> = Vec::new();
    for c in world.cavs().iter() {
        if c.id == *agent_id || c.status == CavStatus::Completed {
            continue;
        }
        candidates.push(Candidate {
            id: c.id.to_string(),
            class: ObjectClass::Vehicle,
            position: c.state.position,
            heading: c.state.heading,
            speed: c.state.speed,
            length: c.footprint.length,
            light: None,
            occluder: Some(Obb::new(c.state.position, c.state.heading, c.footprint)),
        });
    }
    for a in world.actor_snapshots() {
        let blocks = matches!(a.kind, ActorKind::Vehicle | ActorKind::Static);
        candidates.push(Candidate {
            id: a.id.clone(),
            class: a.kind.into(),
            position: a.position,
            heading: a.heading,
            speed: a.speed,
            length: a.footprint.length,
            light: None,
            occluder: blocks.then(|| Obb::new(a.position, a.heading, a.footprint)),
        });
    }
    for l in world.light_snapshots() {
        // Only lights governing our direction of travel face the camera.
        if normalize_angle(l.heading - st.heading).abs() > std::f64::consts::FRAC_PI_3 {
            continue;
        }
        candidates.push(Candidate {
            id: l.id.clone(),
            class: ObjectClass::TrafficLight,
            position: (l.stop_line[0] + l.stop_line[1]) * 0.5,
            heading: l.heading,
            speed: 0.0,
            length: 0.0,
            light: Some(l.state),
            occluder: None,
        });
    }

    let half_fov = sensing.fov_deg.to_radians() / 2.0;
    let forward = st.forward();
    let mut nearby = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let rel = world_to_ego(st.position, st.heading, c.position);
        let range = rel.distance();
        if range > sensing.range || range < 1e-9 {
            continue;
        }
        if rel.right.atan2(rel.front).abs() > half_fov {
            continue;
        }
        let hidden = candidates.iter().enumerate().any(|(j, o)| {
            j != i
                && o.occluder.is_some_and(|b| {
                    o.position.distance(st.position) < range
                        && b.intersects_segment(st.position, c.position)
                })
        });
        if hidden {
            continue;
        }
        let obj_vel = Vec2::from_heading(c.heading) * c.speed;
        nearby.push(NearbyObject {
            id: c.id.clone(),
            class: c.class,
            relative: rel,
            range,
            relative_speed: obj_vel.dot(forward) - st.speed,
            motion: motion_tag(c.speed, c.heading, st.heading),
            light: c.light,
            length: c.length,
        });
    }
    nearby.sort_by(|a, b| a.range.total_cmp(&b.range).then_with(|| a.id.cmp(&b.id)));

    let route = ego.tracker.route();
    let target_s = ego.tracker.arc_length() + sensing.goal_lookahead;
    let goal = route.point_at(target_s);
    Ok(Observation {
        agent_id: agent_id.clone(),
        ego: st,
        nearby_objects: nearby,
        goal_offset: world_to_ego(st.position, st.heading, goal),
        goal_is_endpoint: target_s >= route.length(),
        speed_limit: ego.speed_limit,
        image: None,
        sim_time: world.time(),
    })
}
