use serde::{Deserialize, Serialize};

use super::geometry::{normalize_angle, Vec2};
use super::SimError;
use crate::signals::ControlCommand;

/// Continuous ego kinematics. Heading is counterclockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub timestamp: f64,
}

impl VehicleState {
    pub fn at(position: Vec2, heading: f64, speed: f64) -> Self {
        VehicleState {
            position,
            heading: normalize_angle(heading),
            speed: speed.max(0.0),
            acceleration: 0.0,
            timestamp: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.heading.is_finite()
            && self.speed.is_finite()
            && self.acceleration.is_finite()
            && self.timestamp.is_finite()
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::from_heading(self.heading)
    }

    pub fn velocity(&self) -> Vec2 {
        self.forward() * self.speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleLimits {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub max_speed: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        VehicleLimits {
            wheelbase: 2.5,
            max_steer: 0.6,
            max_accel: 3.0,
            max_decel: 6.0,
            max_speed: 20.0,
        }
    }
}

impl VehicleLimits {
    pub fn validate(&self) -> Result<(), SimError> {
        let all_positive = [
            self.wheelbase,
            self.max_steer,
            self.max_accel,
            self.max_decel,
            self.max_speed,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
        if !all_positive {
            return Err(SimError::InvalidLimits("all limits must be finite and > 0"));
        }
        if self.max_steer >= std::f64::consts::FRAC_PI_2 {
            return Err(SimError::InvalidLimits("max_steer must be below pi/2"));
        }
        Ok(())
    }

    /// Largest curvature magnitude the steering can produce, 1/m.
    pub fn max_curvature(&self) -> f64 {
        self.max_steer.tan() / self.wheelbase
    }
}

/// Advances one vehicle by `dt` under the kinematic bicycle model.
///
/// `cmd.steer` is positive to the right, so it turns the heading clockwise.
/// Speed is integrated first and the pose follows the exact arc traced at the
/// step's mean speed, which keeps constant-steer motion on a true circle.
pub fn step_vehicle(
    state: &VehicleState,
    cmd: &ControlCommand,
    dt: f64,
    limits: &VehicleLimits,
) -> Result<VehicleState, SimError> {
    if !state.is_finite() || !cmd.is_finite() || !dt.is_finite() {
        return Err(SimError::NonFinite);
    }
    if dt <= 0.0 {
        return Err(SimError::InvalidStep(dt));
    }

    let accel = cmd.throttle * limits.max_accel - cmd.brake * limits.max_decel;
    let v0 = state.speed;
    let v1 = (v0 + accel * dt).clamp(0.0, limits.max_speed);
    let distance = 0.5 * (v0 + v1) * dt;

    let delta = -cmd.steer * limits.max_steer;
    let dtheta = distance * delta.tan() / limits.wheelbase;
    let theta0 = state.heading;
    let displacement = if dtheta.abs() < 1e-12 {
        Vec2::from_heading(theta0) * distance
    } else {
        let r = distance / dtheta;
        let theta1 = theta0 + dtheta;
        Vec2::new(r * (theta1.sin() - theta0.sin()), r * (theta0.cos() - theta1.cos()))
    };

    let next = VehicleState {
        position: state.position + displacement,
        heading: normalize_angle(theta0 + dtheta),
        speed: v1,
        acceleration: (v1 - v0) / dt,
        timestamp: state.timestamp + dt,
    };
    if !next.is_finite() {
        return Err(SimError::NonFinite);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmd(steer: f64, throttle: f64, brake: f64) -> ControlCommand {
        ControlCommand {
            steer,
            throttle,
            brake,
        }
    }

    #[test]
    fn zero_input_is_fixed_point() {
        let s = VehicleState::at(Vec2::new(3.0, -2.0), 0.7, 0.0);
        let n = step_vehicle(&s, &cmd(0.0, 0.0, 0.0), 0.05, &VehicleLimits::default()).unwrap();
        assert_eq!(n.position, s.position);
        assert_eq!(n.heading, s.heading);
        assert_eq!(n.speed, 0.0);
    }

    #[test]
    fn straight_line_one_second() {
        let s = VehicleState::at(Vec2::ZERO, 0.3, 5.0);
        let n = step_vehicle(&s, &cmd(0.0, 0.0, 0.0), 1.0, &VehicleLimits::default()).unwrap();
        let moved = n.position - s.position;
        assert!((moved.norm() - 5.0).abs() < 1e-9);
        assert!((moved.dot(s.forward()) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn braking_never_goes_negative() {
        let limits = VehicleLimits::default();
        let mut s = VehicleState::at(Vec2::ZERO, 0.0, 3.0);
        for _ in 0..100 {
            let n = step_vehicle(&s, &cmd(0.0, 0.0, 1.0), 0.05, &limits).unwrap();
            assert!(n.speed <= s.speed);
            assert!(n.speed >= 0.0);
            s = n;
        }
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn right_steer_turns_clockwise() {
        let s = VehicleState::at(Vec2::ZERO, 0.0, 5.0);
        let n = step_vehicle(&s, &cmd(0.5, 0.0, 0.0), 0.1, &VehicleLimits::default()).unwrap();
        assert!(n.heading < 0.0);
        assert!(n.position.y < 0.0);
    }

    #[test]
    fn speed_capped() {
        let limits = VehicleLimits::default();
        let s = VehicleState::at(Vec2::ZERO, 0.0, limits.max_speed);
        let n = step_vehicle(&s, &cmd(0.0, 1.0, 0.0), 0.05, &limits).unwrap();
        assert_eq!(n.speed, limits.max_speed);
    }

    #[test]
    fn rejects_non_finite() {
        let s = VehicleState::at(Vec2::ZERO, 0.0, 1.0);
        let l = VehicleLimits::default();
        assert!(matches!(
            step_vehicle(&s, &cmd(f64::NAN, 0.0, 0.0), 0.05, &l),
            Err(SimError::NonFinite)
        ));
        let mut bad = s;
        bad.position.x = f64::INFINITY;
        assert!(step_vehicle(&bad, &cmd(0.0, 0.0, 0.0), 0.05, &l).is_err());
        assert!(step_vehicle(&s, &cmd(0.0, 0.0, 0.0), 0.0, &l).is_err());
    }

    #[test]
    fn limits_validation() {
        assert!(VehicleLimits::default().validate().is_ok());
        let mut l = VehicleLimits {
            max_steer: 1.6,
            ..Default::default()
        };
        assert!(l.validate().is_err());
        l = VehicleLimits::default();
        l.wheelbase = 0.0;
        assert!(l.validate().is_err());
    }
}
