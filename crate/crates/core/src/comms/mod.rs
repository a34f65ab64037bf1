//! Simulated V2V broadcast channel with range gating, fixed latency, seeded
//! loss and bandwidth metering.
//!
//! Range is checked once, at send time. Only running CAVs send or receive;
//! other senders (an operator, a roadside unit) broadcast from an explicit
//! position. Bandwidth is the mean size of delivered envelopes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langpack::{measure, EncodedMessage};
use crate::world_sim::{CavStatus, Vec2, WorldSnapshot};
use crate::AgentId;

#[derive(Debug, Error, PartialEq)]
pub enum CommsError {
    #[error("invalid channel config: {0}")]
    InvalidConfig(&'static str),
    #[error("sender {0} is not a running vehicle in the snapshot")]
    UnknownSender(AgentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub range_m: f64,
    pub latency_s: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            range_m: 200.0,
            latency_s: 0.0,
            drop_prob: 0.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), CommsError> {
        if !(self.range_m > 0.0 && self.range_m.is_finite()) {
            return Err(CommsError::InvalidConfig("range_m must be > 0"));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(CommsError::InvalidConfig("latency_s must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(CommsError::InvalidConfig("drop_prob must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub sender_id: AgentId,
    pub receiver_id: AgentId,
    pub sent_at: f64,
    /// Always `sent_at + latency_s`.
    pub deliver_at: f64,
    pub message: EncodedMessage,
}

/// One line of the channel event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEvent {
    pub sent_at: f64,
    pub sender: AgentId,
    pub receiver: AgentId,
    pub size_bytes: usize,
    pub dropped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    /// Mean delivered message size per sender, KB.
    pub per_agent: BTreeMap<AgentId, f64>,
    /// Mean delivered message size over all senders, KB; 0 without deliveries.
    pub mean_kb: f64,
    pub broadcasts: usize,
    pub deliveries: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Meter {
    kb: f64,
    deliveries: usize,
}

/// Receiver selection for [`Channel::send_from`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reach {
    /// Only this CAV; every CAV when unset.
    pub target: Option<AgentId>,
    /// Deliver regardless of the range limit.
    pub ignore_range: bool,
}

pub struct Channel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    queues: BTreeMap<AgentId, Vec<Envelope>>,
    events: Vec<ChannelEvent>,
    meters: BTreeMap<AgentId, Meter>,
    broadcasts: usize,
}

impl Channel {
    pub fn new(cfg: ChannelConfig) -> Result<Self, CommsError> {
        cfg.validate()?;
        Ok(Channel {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            queues: BTreeMap::new(),
            events: Vec::new(),
            meters: BTreeMap::new(),
            broadcasts: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    /// Broadcasts from a running CAV to every other running CAV in range.
    pub fn broadcast(
        &mut self,
        sender: &AgentId,
        msg: &EncodedMessage,
        snapshot: &WorldSnapshot,
    ) -> Result<Vec<Envelope>, CommsError> {
        let me = snapshot
            .cavs
            .iter()
            .find(|c| c.id == *sender && c.status == CavStatus::Running)
            .ok_or_else(|| CommsError::UnknownSender(sender.clone()))?;
        Ok(self.broadcast_from(sender, me.state.position, msg, snapshot))
    }

    /// Broadcasts from an arbitrary position, for senders that are not CAVs.
    pub fn broadcast_from(
        &mut self,
        sender: &AgentId,
        position: Vec2,
        msg: &EncodedMessage,
        snapshot: &WorldSnapshot,
    ) -> Vec<Envelope> {
        self.send_from(sender, position, msg, snapshot, Reach::default())
    }

    /// Sends from an arbitrary position to the running CAVs selected by
    /// `reach`. Drops and accounting work as for broadcasts.
    pub fn send_from(
        &mut self,
        sender: &AgentId,
        position: Vec2,
        msg: &EncodedMessage,
        snapshot: &WorldSnapshot,
        reach: Reach,
    ) -> Vec<Envelope> {
        self.broadcasts += 1;
        let now = snapshot.time;
        let range = self.cfg.range_m;
        let mut receivers: Vec<&AgentId> = snapshot
            .cavs
            .iter()
            .filter(|c| c.id != *sender && c.status == CavStatus::Running)
            .filter(|c| reach.target.as_ref().is_none_or(|t| *t == c.id))
            .filter(|c| reach.ignore_range || c.state.position.distance(position) <= range)
            .map(|c| &c.id)
            .collect();
        receivers.sort();
        let mut out = Vec::new();
        for r in receivers {
            // one draw per in-range receiver keeps the stream independent of drop_prob
            let dropped = self.rng.gen::<f64>() < self.cfg.drop_prob;
            self.events.push(ChannelEvent {
                sent_at: now,
                sender: sender.clone(),
                receiver: r.clone(),
                size_bytes: msg.total_bytes(),
                dropped,
            });
            if dropped {
                continue;
            }
            let env = Envelope {
                sender_id: sender.clone(),
                receiver_id: r.clone(),
                sent_at: now,
                deliver_at: now + self.cfg.latency_s,
                message: msg.clone(),
            };
            let m = self.meters.entry(sender.clone()).or_default();
            m.kb += measure(msg);
            m.deliveries += 1;
            self.queues.entry(r.clone()).or_default().push(env.clone());
            out.push(env);
        }
        out
    }

    /// Removes and returns the envelopes due for `receiver` by `now`,
    /// ordered by send time.
    pub fn poll(&mut self, receiver: &AgentId, now: f64) -> Vec<Envelope> {
        let Some(q) = self.queues.get_mut(receiver) else {
            return Vec::new();
        };
        let (mut due, rest): (Vec<Envelope>, Vec<Envelope>) =
            q.drain(..).partition(|e| e.deliver_at <= now + 1e-9);
        *q = rest;
        due.sort_by(|a, b| {
            a.sent_at
                .total_cmp(&b.sent_at)
                .then_with(|| a.sender_id.cmp(&b.sender_id))
        });
        due
    }

    pub fn events(&self) -> &[ChannelEvent] {
        &self.events
    }

    /// Hands over the event log accumulated since the last call.
    pub fn drain_events(&mut self) -> Vec<ChannelEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn bandwidth_report(&self) -> BandwidthReport {
        let (kb, n) = self
            .meters
            .values()
            .fold((0.0, 0usize), |(k, n), m| (k + m.kb, n + m.deliveries));
        BandwidthReport {
            per_agent: self
                .meters
                .iter()
                .filter(|(_, m)| m.deliveries > 0)
                .map(|(id, m)| (id.clone(), m.kb / m.deliveries as f64))
                .collect(),
            mean_kb: if n == 0 { 0.0 } else { kb / n as f64 },
            broadcasts: self.broadcasts,
            deliveries: n,
        }
    }
}
