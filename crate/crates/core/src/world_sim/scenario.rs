//! Scenario files: TOML documents describing the road layout, the CAVs with
//! their routes, scripted actors, traffic lights and simulation settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::geometry::{Footprint, Vec2};
use super::infractions::Coefficients;
use super::route::RouteSpec;
use super::vehicle::VehicleLimits;
use super::SimError;
use crate::AgentId;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::physics_dt")]
    pub physics_dt: f64,
    #[serde(default = "defaults::decision_tick")]
    pub decision_tick: f64,
    #[serde(default = "defaults::timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub sensing: SensingConfig,
    /// Seconds without progress at standstill before a CAV counts as stuck.
    #[serde(default = "defaults::stuck_timeout")]
    pub stuck_timeout: f64,
    /// Camera frame used for every agent and tick, relative to the scenario file.
    #[serde(default)]
    pub frame: Option<PathBuf>,
    /// Optional directory of per-tick frames laid out as `<agent>/<tick:05>.jpg`.
    #[serde(default)]
    pub frames_dir: Option<PathBuf>,
    #[serde(default)]
    pub coefficients: Coefficients,
    #[serde(default)]
    pub map: MapSpec,
    #[serde(default, rename = "light")]
    pub lights: Vec<LightSpec>,
    #[serde(rename = "cav")]
    pub cavs: Vec<CavSpec>,
    #[serde(default, rename = "actor")]
    pub actors: Vec<ActorSpec>,
}

mod defaults {
    pub fn physics_dt() -> f64 {
        0.05
    }
    pub fn decision_tick() -> f64 {
        1.0
    }
    pub fn timeout() -> f64 {
        300.0
    }
    pub fn stuck_timeout() -> f64 {
        60.0
    }
    pub fn sensing_range() -> f64 {
        60.0
    }
    pub fn fov_deg() -> f64 {
        110.0
    }
    pub fn goal_lookahead() -> f64 {
        20.0
    }
    pub fn speed_limit() -> f64 {
        10.0
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingConfig {
    #[serde(default = "defaults::sensing_range")]
    pub range: f64,
    #[serde(default = "defaults::fov_deg")]
    pub fov_deg: f64,
    /// Distance along the route from the ego projection to the navigation goal.
    #[serde(default = "defaults::goal_lookahead")]
    pub goal_lookahead: f64,
}

impl Default for SensingConfig {
    fn default() -> Self {
        SensingConfig {
            range: defaults::sensing_range(),
            fov_deg: defaults::fov_deg(),
            goal_lookahead: defaults::goal_lookahead(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    /// Drivable lane areas. Leaving all of them is a lane invasion.
    #[serde(default, rename = "lane")]
    pub lanes: Vec<LaneSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSpec {
    #[serde(default)]
    pub name: String,
    pub polygon: Vec<Vec2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Green,
    Yellow,
    Red,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightPhase {
    pub at: f64,
    pub state: LightState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    pub id: String,
    pub stop_line: [Vec2; 2],
    /// Travel direction the light controls, degrees counterclockwise from +x.
    pub heading_deg: f64,
    pub phases: Vec<LightPhase>,
    /// When set, the phase timeline repeats with this period.
    #[serde(default)]
    pub cycle: Option<f64>,
}

impl LightSpec {
    pub fn state_at(&self, t: f64) -> LightState {
        let t = match self.cycle {
            Some(c) if c > 0.0 => t.rem_euclid(c),
            _ => t,
        };
        self.phases
            .iter()
            .take_while(|p| p.at <= t)
            .last()
            .or_else(|| self.phases.first())
            .map(|p| p.state)
            .unwrap_or(LightState::Green)
    }

    pub fn heading(&self) -> f64 {
        self.heading_deg.to_radians()
    }

    pub fn midpoint(&self) -> Vec2 {
        (self.stop_line[0] + self.stop_line[1]) * 0.5
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub heading_deg: f64,
    #[serde(default)]
    pub speed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavSpec {
    pub id: AgentId,
    pub start: StartPose,
    pub route: RouteSpec,
    #[serde(default = "defaults::speed_limit")]
    pub speed_limit: f64,
    #[serde(default)]
    pub limits: VehicleLimits,
    #[serde(default = "car")]
    pub footprint: Footprint,
}

fn car() -> Footprint {
    Footprint::CAR
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Vehicle,
    Pedestrian,
    Cyclist,
    Static,
}

impl ActorKind {
    pub fn default_footprint(self) -> Footprint {
        match self {
            ActorKind::Vehicle => Footprint::CAR,
            ActorKind::Pedestrian => Footprint {
                length: 0.6,
                width: 0.6,
            },
            ActorKind::Cyclist => Footprint {
                length: 1.8,
                width: 0.7,
            },
            ActorKind::Static => Footprint {
                length: 2.0,
                width: 2.0,
            },
        }
    }
}

/// A scripted actor walking its path at a scheduled speed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub id: String,
    pub kind: ActorKind,
    /// One point for a parked actor, otherwise the polyline it follows.
    pub path: Vec<Vec2>,
    #[serde(default)]
    pub speed: f64,
    /// Piecewise-linear `[time, speed]` schedule overriding `speed`.
    #[serde(default)]
    pub speed_profile: Vec<[f64; 2]>,
    #[serde(default)]
    pub start_time: f64,
    #[serde(default)]
    pub despawn_at_end: bool,
    /// Heading for single-point actors.
    #[serde(default)]
    pub heading_deg: f64,
    #[serde(default)]
    pub footprint: Option<Footprint>,
}

impl ActorSpec {
    pub fn footprint(&self) -> Footprint {
        self.footprint.unwrap_or_else(|| self.kind.default_footprint())
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        if t < self.start_time {
            return 0.0;
        }
        let p = &self.speed_profile;
        if p.is_empty() {
            return self.speed;
        }
        if t <= p[0][0] {
            return p[0][1];
        }
        for w in p.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= b[0] {
                let f = if b[0] > a[0] { (t - a[0]) / (b[0] - a[0]) } else { 1.0 };
                return a[1] + f * (b[1] - a[1]);
            }
        }
        p[p.len() - 1][1]
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Loads a scenario and resolves relative asset paths against its directory.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        let mut s = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        s.frame = s.frame.map(|f| base.join(f));
        s.frames_dir = s.frames_dir.map(|f| base.join(f));
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.cavs.is_empty() {
            return bad("scenario needs at least one [[cav]]".into());
        }
        if !(self.physics_dt > 0.0 && self.physics_dt <= 0.1) {
            return bad(format!("physics_dt {} outside (0, 0.1]", self.physics_dt));
        }
        if !(self.timeout > 0.0) || !(self.decision_tick > 0.0) {
            return bad("timeout and decision_tick must be > 0".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.cavs {
            if !c.id.is_wire_safe() {
                return bad(format!("cav id {:?} must be alphanumeric, '_' or '-'", c.id.as_str()));
            }
            if !ids.insert(c.id.as_str().to_string()) {
                return bad(format!("duplicate cav id {}", c.id));
            }
            c.route.validate()?;
            c.limits.validate()?;
        }
        for a in &self.actors {
            if a.path.is_empty() {
                return bad(format!("actor {} has an empty path", a.id));
            }
        }
        for l in &self.lights {
            if l.phases.is_empty() {
                return bad(format!("light {} has no phases", l.id));
            }
        }
        for lane in &self.map.lanes {
            if lane.polygon.len() < 3 {
                return bad(format!("lane {:?} polygon needs 3+ points", lane.name));
            }
        }
        self.coefficients.validate()?;
        Ok(())
    }
}
