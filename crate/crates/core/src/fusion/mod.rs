//! Receiver-side processing of incoming packets: coordinate transformation
//! into the ego frame, dead-reckoned temporal alignment and aggregation with
//! the receiver's own reasoning into a decision context.
//!
//! Packet metadata carries no heading, so a sender's direction of motion is
//! inferred from its two most recent packets; a sender's first packet is not
//! extrapolated.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langpack::{EncodedMessage, LangPackError, LangPackPacket};
use crate::m3cot::M3CoTResult;
use crate::world_sim::{ego_to_world, world_to_ego, EgoPoint, Observation, Vec2, VehicleState};
use crate::AgentId;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("non-finite coordinates")]
    NonFinite,
    #[error("packet from {sender} stamped {stamp} is ahead of receiver time {now}")]
    ClockSkew { sender: AgentId, stamp: f64, now: f64 },
    #[error(transparent)]
    Malformed(#[from] LangPackError),
}

/// `world_point` in the receiver's frame: `front` along its heading,
/// `right` perpendicular to it.
pub fn to_ego_frame(receiver: &VehicleState, world_point: Vec2) -> Result<EgoPoint, FusionError> {
    if !(receiver.position.is_finite() && receiver.heading.is_finite() && world_point.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    Ok(world_to_ego(receiver.position, receiver.heading, world_point))
}

/// Inverse of [`to_ego_frame`].
pub fn from_ego_frame(receiver: &VehicleState, p: EgoPoint) -> Result<Vec2, FusionError> {
    if !(receiver.position.is_finite()
        && receiver.heading.is_finite()
        && p.right.is_finite()
        && p.front.is_finite())
    {
        return Err(FusionError::NonFinite);
    }
    Ok(ego_to_world(receiver.position, receiver.heading, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aligned {
    pub location: Vec2,
    pub age: f64,
}

/// Extrapolates a packet's location to `now` at constant speed along
/// `direction` (world heading). Without a direction the location is kept.
pub fn align_time(
    packet: &LangPackPacket,
    now: f64,
    direction: Option<f64>,
) -> Result<Aligned, FusionError> {
    if !(now.is_finite() && packet.timestamp.is_finite() && packet.location.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    let age = now - packet.timestamp;
    if age < 0.0 {
        return Err(FusionError::ClockSkew {
            sender: packet.agent_id.clone(),
            stamp: packet.timestamp,
            now,
        });
    }
    let location = match direction {
        Some(h) if age > 0.0 && packet.speed != 0.0 => {
            packet.location + Vec2::from_heading(h) * (packet.speed * age)
        }
        _ => packet.location,
    };
    Ok(Aligned { location, age })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPacket {
    pub packet: LangPackPacket,
    /// The payload exactly as received.
    pub payload: String,
    /// Where the sender was when it sent, in the receiver's frame.
    pub sender_ego: EgoPoint,
    /// Where the sender is estimated to be now, in the receiver's frame.
    pub aligned_ego: EgoPoint,
    pub aligned_world: Vec2,
    pub speed: f64,
    pub age: f64,
}

#[derive(Debug, Clone, Copy)]
struct Track {
    stamp: f64,
    location: Vec2,
    direction: Option<f64>,
}

/// Per-receiver fusion state: the motion history of each sender.
#[derive(Debug, Clone, Default)]
pub struct Fuser {
    tracks: BTreeMap<AgentId, Track>,
}

impl Fuser {
    pub fn new() -> Self {
        Self::default()
    }

    fn observe(&mut self, p: &LangPackPacket) -> Option<f64> {
        let prev = self.tracks.get(&p.agent_id).copied();
        let direction = match prev {
            Some(t) if p.timestamp > t.stamp => {
                let d = p.location - t.location;
                if d.norm() > 1e-3 {
                    Some(d.y.atan2(d.x))
                } else {
                    t.direction
                }
            }
            Some(t) if p.timestamp == t.stamp => t.direction,
            Some(t) => return t.direction,
            None => None,
        };
        self.tracks.insert(
            p.agent_id.clone(),
            Track {
                stamp: p.timestamp,
                location: p.location,
                direction,
            },
        );
        direction
    }

    /// Decodes text-carrying messages, keeps the newest packet per sender and
    /// returns them aligned to `now`, nearest first. Undecodable or
    /// future-stamped packets come back as errors without affecting the rest.
    pub fn fuse(
        &mut self,
        receiver: &VehicleState,
        now: f64,
        messages: &[EncodedMessage],
    ) -> (Vec<FusedPacket>, Vec<FusionError>) {
        let mut errors = Vec::new();
        let mut packets: Vec<(LangPackPacket, String)> = Vec::new();
        for m in messages {
            match m.packet() {
                Some(Ok(p)) => packets.push((p, m.payload().to_string())),
                Some(Err(e)) => errors.push(e.into()),
                None => {}
            }
        }
        packets.sort_by(|a, b| a.0.timestamp.total_cmp(&b.0.timestamp));

        let mut latest: BTreeMap<AgentId, FusedPacket> = BTreeMap::new();
        for (p, payload) in packets {
            if p.timestamp > now {
                errors.push(FusionError::ClockSkew {
                    sender: p.agent_id.clone(),
                    stamp: p.timestamp,
                    now,
                });
                continue;
            }
            let direction = self.observe(&p);
            let fused = align_time(&p, now, direction).and_then(|a| {
                Ok(FusedPacket {
                    sender_ego: to_ego_frame(receiver, p.location)?,
                    aligned_ego: to_ego_frame(receiver, a.location)?,
                    aligned_world: a.location,
                    speed: p.speed,
                    age: a.age,
                    payload,
                    packet: p,
                })
            });
            match fused {
                Ok(f) => {
                    latest.insert(f.packet.agent_id.clone(), f);
                }
                Err(e) => errors.push(e),
            }
        }
        let mut out: Vec<FusedPacket> = latest.into_values().collect();
        out.sort_by(|a, b| {
            a.aligned_ego
                .distance()
                .total_cmp(&b.aligned_ego.distance())
                .then_with(|| a.packet.agent_id.cmp(&b.packet.agent_id))
        });
        (out, errors)
    }
}

/// Text handed to the decision stage plus the senders it includes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub text: String,
    pub senders: Vec<AgentId>,
}

/// Header naming a sender and where it is relative to the receiver.
pub fn sender_header(f: &FusedPacket) -> String {
    // Rounded first so that a value printing as 0.000 never reads "left".
    let r3 = |v: f64| (v * 1000.0).round() / 1000.0;
    let (front, right) = (r3(f.aligned_ego.front), r3(f.aligned_ego.right));
    format!(
        "Agent {}, {:.3} m {}, {:.3} m {}",
        f.packet.agent_id,
        front.abs(),
        if front >= 0.0 { "ahead" } else { "behind" },
        right.abs(),
        if right >= 0.0 { "right" } else { "left" },
    )
}

/// Own observations first, then every fused packet verbatim under its
/// sender header, nearest sender first.
pub fn aggregate(own: &M3CoTResult, fused: &[FusedPacket], obs: &Observation) -> DecisionContext {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "My state: located at [{:.3}, {:.3}], current speed: {:.3}m/s, acceleration: {:.3}m/s^2, time: {:.3}s.",
        obs.ego.position.x, obs.ego.position.y, obs.ego.speed, obs.ego.acceleration, obs.sim_time
    );
    for (header, body) in own.sections() {
        if !body.is_empty() {
            let _ = write!(text, "\nMy {header}:\n{body}\n");
        }
    }
    let mut fused: Vec<&FusedPacket> = fused.iter().collect();
    fused.sort_by(|a, b| a.aligned_ego.distance().total_cmp(&b.aligned_ego.distance()));
    if !fused.is_empty() {
        text.push_str("\nMessages received from nearby agents (nearest first):\n");
        for f in &fused {
            let _ = write!(
                text,
                "\n{} (message age {:.3} s, speed {:.3} m/s):\n{}",
                sender_header(f),
                f.age,
                f.speed,
                f.payload
            );
            if !f.payload.ends_with('\n') {
                text.push('\n');
            }
        }
    }
    DecisionContext {
        text,
        senders: fused.iter().map(|f| f.packet.agent_id.clone()).collect(),
    }
}
