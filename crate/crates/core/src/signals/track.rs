use super::{clamp_control, ContinuousTrajectory, ControlCommand, DiscreteTrajectory};
use crate::world_sim::{VehicleLimits, VehicleState};

/// Waypoints closer than this in front of the ego count as reached.
const AHEAD_EPS: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerGains {
    /// Commanded acceleration per m/s of speed error.
    pub speed_kp: f64,
    pub min_lookahead: f64,
    /// Lookahead grows with speed: `max(min_lookahead, lookahead_time * v)`.
    pub lookahead_time: f64,
}

impl Default for TrackerGains {
    fn default() -> Self {
        TrackerGains {
            speed_kp: 1.0,
            min_lookahead: 3.0,
            lookahead_time: 0.8,
        }
    }
}

fn longitudinal(target: f64, speed: f64, limits: &VehicleLimits, gains: &TrackerGains) -> (f64, f64) {
    let accel = gains.speed_kp * (target - speed);
    let (mut throttle, mut brake) = if accel >= 0.0 {
        (accel / limits.max_accel, 0.0)
    } else {
        (0.0, -accel / limits.max_decel)
    };
    if accel.abs() < 1e-3 {
        throttle = 0.0;
        brake = 0.0;
    }
    if target < 0.1 && speed < 0.5 {
        // hold the vehicle once it is nearly stopped
        throttle = 0.0;
        brake = brake.max(0.3);
    }
    (throttle, brake)
}

fn steer_for_curvature(curvature: f64, limits: &VehicleLimits) -> f64 {
    let delta = (limits.wheelbase * curvature).atan();
    delta / limits.max_steer
}

/// Pure-pursuit tracking of waypoints given in the current ego frame.
///
/// Steering aims at the first waypoint beyond the lookahead distance; the
/// speed target is the spacing of the next waypoint pair divided by the
/// waypoint period. With nothing ahead the vehicle safe-stops.
pub fn track_discrete(
    traj: &DiscreteTrajectory,
    state: &VehicleState,
    limits: &VehicleLimits,
) -> ControlCommand {
    track_discrete_with(traj, state, limits, &TrackerGains::default())
}

pub fn track_discrete_with(
    traj: &DiscreteTrajectory,
    state: &VehicleState,
    limits: &VehicleLimits,
    gains: &TrackerGains,
) -> ControlCommand {
    let wps = &traj.waypoints;
    let Some(next) = wps.iter().position(|w| w.front > AHEAD_EPS) else {
        return ControlCommand::SAFE_STOP;
    };
    let lookahead = gains.min_lookahead.max(gains.lookahead_time * state.speed);
    let target = wps[next..]
        .iter()
        .filter(|w| w.front > AHEAD_EPS)
        .find(|w| w.distance() >= lookahead)
        .or_else(|| wps[next..].iter().rev().find(|w| w.front > AHEAD_EPS))
        .copied()
        .expect("at least one waypoint ahead");

    let d2 = target.right * target.right + target.front * target.front;
    let curvature = 2.0 * target.right / d2;

    let spacing = if next == 0 {
        wps[0].distance()
    } else {
        let (a, b) = (wps[next - 1], wps[next]);
        (b.right - a.right).hypot(b.front - a.front)
    };
    let target_speed = if traj.spacing_s > 0.0 {
        spacing / traj.spacing_s
    } else {
        0.0
    };
    let (throttle, brake) = longitudinal(target_speed.min(limits.max_speed), state.speed, limits, gains);
    clamp_control(
        &ControlCommand {
            steer: steer_for_curvature(curvature, limits),
            throttle,
            brake,
        },
        limits,
    )
}

/// Feed-forward steering from the active segment's curvature plus
/// proportional speed control. `elapsed` is the time since the trajectory
/// was issued. Past the last segment the vehicle holds that segment's speed
/// with the wheels straight.
pub fn rollout_continuous(
    traj: &ContinuousTrajectory,
    elapsed: f64,
    state: &VehicleState,
    limits: &VehicleLimits,
) -> ControlCommand {
    rollout_continuous_with(traj, elapsed, state, limits, &TrackerGains::default())
}

pub fn rollout_continuous_with(
    traj: &ContinuousTrajectory,
    elapsed: f64,
    state: &VehicleState,
    limits: &VehicleLimits,
    gains: &TrackerGains,
) -> ControlCommand {
    let (speed, curvature) = match traj.active(elapsed) {
        Some(seg) => (seg.speed, seg.curvature),
        None => (
            traj.segments.last().map(|s| s.speed).unwrap_or(state.speed),
            0.0,
        ),
    };
    let (throttle, brake) = longitudinal(speed.min(limits.max_speed), state.speed, limits, gains);
    clamp_control(
        &ControlCommand {
            steer: steer_for_curvature(curvature, limits),
            throttle,
            brake,
        },
        limits,
    )
}
