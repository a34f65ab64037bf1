//! Driving signals: the three output formulations a model can use, the
//! grammar for reading them out of a completion, and the controllers that
//! turn each into clamped actuation.
//!
//! Conventions shared by every formulation:
//!
//! * ego-frame points are `(x, y)` = (meters to the right, meters to the front);
//! * `steer` and curvature are positive for a right turn;
//! * `steer` is normalized to `[-1, 1]` of the vehicle's `max_steer`.

mod parse;
mod track;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world_sim::{EgoPoint, VehicleLimits};

pub use parse::parse_signal;
pub use track::{rollout_continuous, track_discrete, TrackerGains};

/// Which formulation a run asks the model for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Discrete,
    Continuous,
    Control,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [
        Formulation::Discrete,
        Formulation::Continuous,
        Formulation::Control,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Formulation::Discrete => "discrete",
            Formulation::Continuous => "continuous",
            Formulation::Control => "control",
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "discrete" => Ok(Formulation::Discrete),
            "continuous" => Ok(Formulation::Continuous),
            "control" => Ok(Formulation::Control),
            other => Err(format!("unknown signal formulation {other:?}")),
        }
    }
}

/// Default spacing in time between discrete waypoints.
pub const WAYPOINT_SPACING_S: f64 = 0.5;
/// Default number of discrete waypoints (2 s horizon).
pub const WAYPOINT_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTrajectory {
    /// Ego-frame waypoints, `spacing_s` apart in time, starting one spacing
    /// after the plan time.
    pub waypoints: Vec<EgoPoint>,
    pub spacing_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub speed: f64,
    pub curvature: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTrajectory {
    pub segments: Vec<Segment>,
}

impl ContinuousTrajectory {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Segment active `elapsed` seconds after the plan started.
    pub fn active(&self, elapsed: f64) -> Option<&Segment> {
        let mut t = 0.0;
        for s in &self.segments {
            t += s.duration;
            if elapsed < t {
                return Some(s);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl ControlCommand {
    /// Full brake, wheels straight.
    pub const SAFE_STOP: ControlCommand = ControlCommand {
        steer: 0.0,
        throttle: 0.0,
        brake: 1.0,
    };

    pub const IDLE: ControlCommand = ControlCommand {
        steer: 0.0,
        throttle: 0.0,
        brake: 0.0,
    };

    pub fn new(steer: f64, throttle: f64, brake: f64) -> Self {
        ControlCommand {
            steer,
            throttle,
            brake,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.steer.is_finite() && self.throttle.is_finite() && self.brake.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DrivingSignal {
    Discrete(DiscreteTrajectory),
    Continuous(ContinuousTrajectory),
    Control(ControlCommand),
}

impl DrivingSignal {
    pub fn formulation(&self) -> Formulation {
        match self {
            DrivingSignal::Discrete(_) => Formulation::Discrete,
            DrivingSignal::Continuous(_) => Formulation::Continuous,
            DrivingSignal::Control(_) => Formulation::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no parseable {formulation:?} signal block: {reason}")]
pub struct ParseFailure {
    pub formulation: Formulation,
    pub reason: String,
}

/// Projects a command into the feasible set. Non-finite components fall
/// back to zero; when both pedals are pressed the smaller one is released
/// (brake wins a tie).
pub fn clamp_control(cmd: &ControlCommand, _limits: &VehicleLimits) -> ControlCommand {
    let fin = |v: f64| if v.is_finite() { v } else { 0.0 };
    let steer = fin(cmd.steer).clamp(-1.0, 1.0);
    let mut throttle = fin(cmd.throttle).clamp(0.0, 1.0);
    let mut brake = fin(cmd.brake).clamp(0.0, 1.0);
    if throttle > 0.0 && brake > 0.0 {
        if throttle > brake {
            brake = 0.0;
        } else {
            throttle = 0.0;
        }
    }
    ControlCommand {
        steer,
        throttle,
        brake,
    }
}
