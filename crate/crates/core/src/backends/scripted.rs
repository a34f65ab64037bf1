//! Deterministic rule-based driver that answers stage and decision prompts
//! from the structured [`PolicyContext`] attached to each request.
//!
//! Rules, most restrictive wins:
//!
//! * a vehicle in the ego corridor closer than [`CLOSE_GAP_M`] (center to
//!   center) triggers full braking;
//! * a pedestrian, cyclist, static obstacle or red/yellow light ahead is
//!   approached on a stopping profile that halts short of it;
//! * at decision time only, a received packet whose intent says
//!   "slow down" from a sender ahead inside [`MESSAGE_REACH_M`] brakes to stop
//!   [`MESSAGE_STANDOFF_M`] behind it;
//! * otherwise the car cruises at the speed limit.
//!
//! Steering is pure pursuit toward the navigation goal in every case. The
//! intent text says "slow down" exactly when the car decelerates for a
//! hazard, which is what lets followers react to it.

use std::fmt::Write as _;

use super::{Backend, BackendError, Completion, CompletionRequest, PolicyContext, Purpose};
use crate::fusion::FusedPacket;
use crate::m3cot::{goal_text, objects_text, StageKind};
use crate::signals::{Formulation, WAYPOINT_COUNT, WAYPOINT_SPACING_S};
use crate::world_sim::{LightState, ObjectClass, Observation, VehicleLimits};

pub const SLOW_DOWN: &str = "slow down";
/// Center-to-center gap below which a vehicle ahead forces braking.
pub const CLOSE_GAP_M: f64 = 10.0;
/// Half width of the corridor in which objects count as ahead of us.
pub const CORRIDOR_HALF_WIDTH_M: f64 = 2.5;
/// Lateral tolerance for traffic light stop lines.
pub const LIGHT_HALF_WIDTH_M: f64 = 8.0;
/// Objects farther than this are not planned for.
pub const HAZARD_HORIZON_M: f64 = 40.0;
/// Comfortable deceleration of the stopping profile, m/s^2.
pub const COMFORT_DECEL: f64 = 2.5;
/// Clearance kept in front of a hazard when stopped, meters.
pub const STOP_MARGIN_M: f64 = 2.0;
/// Expected time between replans, seconds.
pub const PLANNING_LAG_S: f64 = 1.0;
pub const MESSAGE_REACH_M: f64 = 30.0;
pub const MESSAGE_LATERAL_M: f64 = 5.0;
pub const MESSAGE_STANDOFF_M: f64 = 3.0;
/// Minimum brake applied on a "slow down" message.
pub const MESSAGE_MIN_BRAKE: f64 = 0.3;
const SPEED_GAIN: f64 = 1.0;
const EGO_HALF_LENGTH: f64 = 2.25;
const CAR_LENGTH: f64 = 4.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Hazard {
    pub what: String,
    /// Distance left to the stopping point, meters.
    pub stop_distance: f64,
    /// True when the rule brakes outright instead of following a profile.
    pub close_vehicle: bool,
}

/// Longitudinal and lateral plan in a formulation-neutral form.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub accel: f64,
    /// 1/m, positive turns right.
    pub curvature: f64,
    /// Brake fraction requested by a received message.
    pub message_brake: Option<f64>,
    pub hazard: Option<Hazard>,
    pub reasons: Vec<String>,
    /// Speed the plan was made at, m/s.
    pub speed: f64,
}

/// Below this speed a car near a hazard counts as waiting for it.
pub const HOLDING_SPEED: f64 = 1.0;

impl Plan {
    /// Braking for a hazard, or waiting in front of one.
    pub fn decelerating_for_hazard(&self) -> bool {
        self.hazard.is_some() && (self.accel < 0.0 || self.speed < HOLDING_SPEED)
    }
}

fn cruise_accel(v: f64, target: f64, lim: &VehicleLimits) -> f64 {
    (SPEED_GAIN * (target - v)).clamp(-lim.max_decel, lim.max_accel)
}

/// Acceleration that brings the car to rest `d` meters ahead. The comfort
/// profile is met at the position one replanning interval ahead.
fn stopping_accel(v: f64, d: f64, lim: &VehicleLimits) -> f64 {
    if d <= 0.5 {
        return -lim.max_decel;
    }
    let profile = (2.0 * COMFORT_DECEL * (d - v * PLANNING_LAG_S).max(0.0)).sqrt();
    let mut a = cruise_accel(v, profile, lim);
    let required = v * v / (2.0 * d);
    if required > COMFORT_DECEL {
        a = a.min(-required);
    }
    a.clamp(-lim.max_decel, lim.max_accel)
}

fn nearest_hazard(obs: &Observation) -> Option<Hazard> {
    let mut best: Option<Hazard> = None;
    for o in &obs.nearby_objects {
        let p = o.relative;
        if p.front <= 0.0 || p.front > HAZARD_HORIZON_M {
            continue;
        }
        let h = match o.class {
            ObjectClass::TrafficLight => {
                if !matches!(o.light, Some(LightState::Red | LightState::Yellow))
                    || p.right.abs() > LIGHT_HALF_WIDTH_M
                    || p.front < EGO_HALF_LENGTH
                {
                    continue;
                }
                let state = if o.light == Some(LightState::Red) { "red" } else { "yellow" };
                Hazard {
                    what: format!("the {state} traffic light {}", o.id),
                    stop_distance: p.front - EGO_HALF_LENGTH - 1.0,
                    close_vehicle: false,
                }
            }
            class => {
                if p.right.abs() > CORRIDOR_HALF_WIDTH_M {
                    continue;
                }
                let gap = p.front - o.length / 2.0 - EGO_HALF_LENGTH;
                if class == ObjectClass::Vehicle {
                    if p.front >= CLOSE_GAP_M {
                        continue;
                    }
                    Hazard {
                        what: format!("the vehicle {} ahead", o.id),
                        stop_distance: gap,
                        close_vehicle: true,
                    }
                } else {
                    Hazard {
                        what: format!("the {} {} ahead", class.label(), o.id),
                        stop_distance: gap - STOP_MARGIN_M,
                        close_vehicle: false,
                    }
                }
            }
        };
        let closer = best.as_ref().is_none_or(|b| {
            (h.close_vehicle, -h.stop_distance) > (b.close_vehicle, -b.stop_distance)
        });
        if closer {
            best = Some(h);
        }
    }
    best
}

/// Senders whose intent asks us to slow down, as (packet, brake fraction).
pub fn slow_down_requests<'a>(
    received: &'a [FusedPacket],
    v: f64,
    lim: &VehicleLimits,
) -> Vec<(&'a FusedPacket, f64)> {
    received
        .iter()
        .filter(|f| {
            let p = f.aligned_ego;
            f.packet.intent_desc.to_lowercase().contains(SLOW_DOWN)
                && p.front > 0.0
                && p.front <= MESSAGE_REACH_M
                && p.right.abs() <= MESSAGE_LATERAL_M
        })
        .map(|f| {
            let d = (f.aligned_ego.front - CAR_LENGTH - MESSAGE_STANDOFF_M).max(0.5);
            let a_req = v * v / (2.0 * d);
            (f, (a_req / lim.max_decel).clamp(MESSAGE_MIN_BRAKE, 1.0))
        })
        .collect()
}

fn pursuit_curvature(obs: &Observation, lim: &VehicleLimits) -> f64 {
    let g = obs.goal_offset;
    let d2 = g.right * g.right + g.front * g.front;
    if d2 < 1e-6 {
        return 0.0;
    }
    let k = lim.max_curvature();
    (2.0 * g.right / d2).clamp(-k, k)
}

/// The plan for the current observation. Received packets only matter when
/// `decision` is set.
pub fn plan(ctx: &PolicyContext, decision: bool) -> Plan {
    let obs = &ctx.observation;
    let lim = &ctx.limits;
    let v = obs.ego.speed;
    let curvature = pursuit_curvature(obs, lim);
    let mut reasons = Vec::new();
    let mut accel = cruise_accel(v, obs.speed_limit.min(lim.max_speed), lim);

    let hazard = nearest_hazard(obs);
    if let Some(h) = &hazard {
        let a = if h.close_vehicle {
            -lim.max_decel
        } else {
            stopping_accel(v, h.stop_distance, lim)
        };
        if a < accel {
            accel = a;
        }
        if h.close_vehicle {
            reasons.push(format!("Reason: {} is too close, braking.", h.what));
        } else {
            reasons.push(format!(
                "Reason: stopping for {} in {:.1} m.",
                h.what,
                h.stop_distance.max(0.0)
            ));
        }
    }

    let mut message_brake = None;
    if decision {
        for (f, b) in slow_down_requests(&ctx.received, v, lim) {
            reasons.push(format!(
                "Reason: received '{SLOW_DOWN}' from Agent {} {:.1} m ahead, braking.",
                f.packet.agent_id, f.aligned_ego.front
            ));
            message_brake = Some(message_brake.map_or(b, |m: f64| m.max(b)));
        }
        if let Some(b) = message_brake {
            accel = accel.min(-b * lim.max_decel);
        }
    }
    Plan {
        accel,
        curvature,
        message_brake,
        hazard,
        reasons,
        speed: v,
    }
}

/// Signal line in the requested formulation.
/// Speeds are capped at `cruise`, or at the current speed if that is higher.
pub fn format_plan(
    plan: &Plan,
    v: f64,
    cruise: f64,
    lim: &VehicleLimits,
    formulation: Formulation,
) -> String {
    let cap = cruise.max(v).min(lim.max_speed);
    match formulation {
        Formulation::Control => {
            let steer = ((lim.wheelbase * plan.curvature).atan() / lim.max_steer).clamp(-1.0, 1.0);
            let (mut throttle, mut brake) = if plan.accel >= 0.0 {
                (plan.accel / lim.max_accel, 0.0)
            } else {
                (0.0, -plan.accel / lim.max_decel)
            };
            if let Some(b) = plan.message_brake {
                throttle = 0.0;
                brake = brake.max(b);
            }
            format!(
                "steer: {:.3}, throttle: {:.3}, brake: {:.3}",
                steer,
                throttle.clamp(0.0, 1.0),
                brake.clamp(0.0, 1.0)
            )
        }
        Formulation::Continuous => {
            let segs: Vec<String> = (1..=2)
                .map(|i| {
                    let s = (v + plan.accel * i as f64).clamp(0.0, cap);
                    format!("({:.3}, {:.4}, 1.0)", s, plan.curvature)
                })
                .collect();
            format!("SEGMENTS: {}", segs.join(", "))
        }
        Formulation::Discrete => {
            let pts: Vec<String> = (1..=WAYPOINT_COUNT)
                .map(|i| {
                    let t = i as f64 * WAYPOINT_SPACING_S;
                    let s = distance_travelled(v, plan.accel, cap, t);
                    let k = plan.curvature;
                    let (right, front) = if k.abs() < 1e-9 {
                        (0.0, s)
                    } else {
                        ((1.0 - (k * s).cos()) / k, (k * s).sin() / k)
                    };
                    format!("({right:.3}, {front:.3})")
                })
                .collect();
            format!("WAYPOINTS: {}", pts.join(" -> "))
        }
    }
}

/// Distance covered in `t` seconds from speed `v` at constant `a` until the
/// speed reaches 0 or `cap`, then at that speed.
fn distance_travelled(v: f64, a: f64, cap: f64, t: f64) -> f64 {
    let end = if a < 0.0 { 0.0 } else { cap.max(v) };
    if a == 0.0 {
        return v * t;
    }
    let t_sat = ((end - v) / a).max(0.0);
    if t <= t_sat {
        v * t + 0.5 * a * t * t
    } else {
        v * t_sat + 0.5 * a * t_sat * t_sat + end * (t - t_sat)
    }
}

fn scene_text(obs: &Observation) -> String {
    let actors = obs
        .nearby_objects
        .iter()
        .filter(|o| o.class != ObjectClass::TrafficLight)
        .count();
    let lights = obs.nearby_objects.len() - actors;
    if actors == 0 && lights == 0 {
        return "Daytime urban road, clear road, no nearby actors.".into();
    }
    let mut s = format!("Daytime urban road with {actors} nearby actor(s)");
    if lights > 0 {
        let _ = write!(s, " and {lights} traffic light(s) facing me");
    }
    s.push('.');
    s
}

fn intent_text(p: &Plan, obs: &Observation) -> String {
    let env = match &p.hazard {
        Some(h) => format!("{} matters most.", capitalize(&h.what)),
        None => "No hazard in my lane.".into(),
    };
    let speed = if p.decelerating_for_hazard() {
        format!(
            "I will {SLOW_DOWN} and stop before {}.",
            p.hazard.as_ref().map(|h| h.what.as_str()).unwrap_or("the hazard")
        )
    } else if p.accel < 0.0 {
        format!("I will ease back to the speed limit of {:.1} m/s.", obs.speed_limit)
    } else {
        format!("I will keep or reach the speed limit of {:.1} m/s.", obs.speed_limit)
    };
    let dir = if p.curvature > 1e-3 {
        "Steer right to follow the route."
    } else if p.curvature < -1e-3 {
        "Steer left to follow the route."
    } else {
        "Keep the lane."
    };
    let avoid = match &p.hazard {
        Some(h) if h.close_vehicle => format!("The car ahead is too close, {SLOW_DOWN}."),
        _ => "Keep a safe distance from other road users.".into(),
    };
    format!(
        "1. Environment Check: {env}\n2. Speed Control: {speed}\n3. Direction Adjustment: {dir}\n4. Avoid Collisions: {avoid}"
    )
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// A rule-based policy served through the backend interface.
pub struct ScriptedBackend {
    id: String,
}

impl ScriptedBackend {
    pub const POLICIES: &'static [&'static str] = &["follow_route"];

    pub fn new(id: impl Into<String>, policy: &str) -> Result<Self, BackendError> {
        let id = id.into();
        if !Self::POLICIES.contains(&policy) {
            return Err(BackendError::Config(format!(
                "backend {id}: unknown scripted policy {policy:?}"
            )));
        }
        Ok(ScriptedBackend { id })
    }

    /// Answer for a request, from its structured context.
    pub fn respond(ctx: &PolicyContext, purpose: Purpose) -> String {
        let obs = &ctx.observation;
        match purpose {
            Purpose::Stage(StageKind::SceneDescription) => scene_text(obs),
            Purpose::Stage(StageKind::ObjectDescription) => {
                if obs.nearby_objects.is_empty() {
                    "No interactive objects nearby.".into()
                } else {
                    objects_text(obs)
                }
            }
            Purpose::Stage(StageKind::NavigationGoal) => goal_text(obs),
            Purpose::Stage(StageKind::FutureIntent) => intent_text(&plan(ctx, false), obs),
            Purpose::Decision(f) => {
                let p = plan(ctx, true);
                let mut out = String::new();
                for r in &p.reasons {
                    out.push_str(r);
                    out.push('\n');
                }
                if p.reasons.is_empty() {
                    out.push_str("Reason: clear road ahead, following the route.\n");
                }
                out.push_str(&format_plan(&p, obs.ego.speed, obs.speed_limit, &ctx.limits, f));
                out
            }
        }
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let ctx = req.policy.as_ref().ok_or_else(|| BackendError::Policy {
            backend_id: self.id.clone(),
            message: "request carries no policy context".into(),
        })?;
        Ok(Completion::text(Self::respond(ctx, req.purpose)))
    }
}
