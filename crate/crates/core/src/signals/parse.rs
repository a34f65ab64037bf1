//! Signal block grammar.
//!
//! ```text
//! control:     steer: <num>, throttle: <num>, brake: <num>
//! continuous:  (<speed> [m/s], <curvature> [1/m], <duration> [s]), ...
//! discrete:    (<x>, <y>), (<x>, <y>), ...
//! ```
//!
//! Keys are case-insensitive and may be spelled out ("steering angle",
//! "throttle position", "brake pressure"). Tuples belong to the same block
//! when only whitespace, commas, semicolons or arrows separate them. The
//! last block in the text wins, so intermediate numbers in a reasoning trace
//! never shadow the final answer.

use std::sync::OnceLock;

use regex::Regex;

use super::{
    clamp_control, ContinuousTrajectory, ControlCommand, DiscreteTrajectory, DrivingSignal,
    Formulation, ParseFailure, Segment, WAYPOINT_SPACING_S,
};
use crate::world_sim::{EgoPoint, VehicleLimits};

const NUM: &str = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)";

fn control_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"(?i)steer(?:ing)?(?:[ _]angle)?\s*[:=]\s*{NUM}[\s,;]*throttle(?:[ _]position)?\s*[:=]\s*{NUM}[\s,;]*brake(?:[ _]pressure)?\s*[:=]\s*{NUM}"
        ))
        .expect("control grammar")
    })
}

fn segment_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"(?i)\(\s*{NUM}\s*(?:m/s)?\s*,\s*{NUM}\s*(?:1/m|/m)?\s*,\s*{NUM}\s*(?:s|sec|seconds)?\s*\)"
        ))
        .expect("segment grammar")
    })
}

fn waypoint_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(r"\(\s*{NUM}\s*(?:m)?\s*,\s*{NUM}\s*(?:m)?\s*\)")).expect("waypoint grammar")
    })
}

fn separator_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[\s,;]|->|=>|→)*$").expect("separator"))
}

fn fail(formulation: Formulation, reason: impl Into<String>) -> ParseFailure {
    ParseFailure {
        formulation,
        reason: reason.into(),
    }
}

fn number(s: &str, formulation: Formulation) -> Result<f64, ParseFailure> {
    let v: f64 = s
        .parse()
        .map_err(|_| fail(formulation, format!("bad number {s:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(fail(formulation, format!("non-finite number {s:?}")))
    }
}

/// The last run of adjacent tuple matches, as capture lists.
fn last_block<'t>(re: &Regex, text: &'t str) -> Vec<regex::Captures<'t>> {
    let mut blocks: Vec<Vec<regex::Captures<'t>>> = Vec::new();
    let mut prev_end: Option<usize> = None;
    for caps in re.captures_iter(text) {
        let m = caps.get(0).unwrap();
        let joined = prev_end.is_some_and(|e| separator_re().is_match(&text[e..m.start()]));
        if !joined || blocks.is_empty() {
            blocks.push(Vec::new());
        }
        prev_end = Some(m.end());
        blocks.last_mut().unwrap().push(caps);
    }
    blocks.pop().unwrap_or_default()
}

/// Extracts the last well-formed signal block of `formulation` from a
/// completion and validates it.
pub fn parse_signal(text: &str, formulation: Formulation) -> Result<DrivingSignal, ParseFailure> {
    match formulation {
        Formulation::Control => {
            let caps = control_re()
                .captures_iter(text)
                .last()
                .ok_or_else(|| fail(formulation, "no steer/throttle/brake block"))?;
            let raw = ControlCommand {
                steer: number(&caps[1], formulation)?,
                throttle: number(&caps[2], formulation)?,
                brake: number(&caps[3], formulation)?,
            };
            Ok(DrivingSignal::Control(clamp_control(&raw, &VehicleLimits::default())))
        }
        Formulation::Continuous => {
            let block = last_block(segment_re(), text);
            if block.is_empty() {
                return Err(fail(formulation, "no (speed, curvature, duration) tuples"));
            }
            let mut segments = Vec::with_capacity(block.len());
            for caps in &block {
                let seg = Segment {
                    speed: number(&caps[1], formulation)?,
                    curvature: number(&caps[2], formulation)?,
                    duration: number(&caps[3], formulation)?,
                };
                if seg.speed < 0.0 {
                    return Err(fail(formulation, "negative segment speed"));
                }
                if seg.duration <= 0.0 {
                    return Err(fail(formulation, "segment duration must be > 0"));
                }
                segments.push(seg);
            }
            Ok(DrivingSignal::Continuous(ContinuousTrajectory { segments }))
        }
        Formulation::Discrete => {
            let block = last_block(waypoint_re(), text);
            if block.len() < 2 {
                return Err(fail(formulation, "need at least two (x, y) waypoints"));
            }
            let waypoints = block
                .iter()
                .map(|c| {
                    Ok(EgoPoint {
                        right: number(&c[1], formulation)?,
                        front: number(&c[2], formulation)?,
                    })
                })
                .collect::<Result<Vec<_>, ParseFailure>>()?;
            Ok(DrivingSignal::Discrete(DiscreteTrajectory {
                waypoints,
                spacing_s: WAYPOINT_SPACING_S,
            }))
        }
    }
}
