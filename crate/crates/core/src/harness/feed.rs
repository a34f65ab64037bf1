//! Live feed for the operator console: versioned JSON frames over a
//! WebSocket, plus the operator command queue the episode loop drains
//! between decision ticks.
//!
//! Server frames: `hello`, `snapshot`, `message_event`, `metrics_update`
//! and `ack`. Client frames: `operator_command`. Every command, accepted or
//! not, gets exactly one `ack` addressed to the client that sent it.

use std::collections::{BTreeMap, VecDeque};
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tungstenite::Message;

use crate::world_sim::{CavStatus, LightState, Vec2, WorldSnapshot};
use crate::AgentId;

pub const FEED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteInfo {
    pub agent: AgentId,
    pub waypoints: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavPose {
    pub id: AgentId,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub status: CavStatus,
    /// Route completion, percent.
    pub progress: f64,
    pub disengaged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorPose {
    pub id: String,
    pub kind: String,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightInfo {
    pub id: String,
    pub state: LightState,
    pub stop_line: [Vec2; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub id: AgentId,
    pub rc: f64,
    pub ip: f64,
    pub ds: f64,
}

/// Frames sent by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Hello {
        scenario: String,
        decision_tick: f64,
        lanes: Vec<Vec<Vec2>>,
        routes: Vec<RouteInfo>,
    },
    Snapshot {
        tick: u64,
        time: f64,
        paused: bool,
        cavs: Vec<CavPose>,
        actors: Vec<ActorPose>,
        lights: Vec<LightInfo>,
    },
    MessageEvent {
        tick: u64,
        time: f64,
        sender: AgentId,
        receiver: AgentId,
        size_bytes: usize,
        kb: f64,
        mode: String,
        dropped: bool,
        /// First characters of the intent section, if the message has text.
        preview: String,
    },
    MetricsUpdate {
        tick: u64,
        time: f64,
        agents: Vec<AgentScore>,
    },
    Ack {
        command_id: Option<String>,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        /// Receivers of an injected message; empty when deferred or dropped.
        #[serde(default)]
        delivered_to: Vec<AgentId>,
        #[serde(default)]
        deferred: bool,
    },
}

impl ServerFrame {
    pub fn snapshot(tick: u64, paused: bool, snap: &WorldSnapshot, disengaged: &[AgentId]) -> Self {
        ServerFrame::Snapshot {
            tick,
            time: snap.time,
            paused,
            cavs: snap
                .cavs
                .iter()
                .map(|c| CavPose {
                    id: c.id.clone(),
                    x: c.state.position.x,
                    y: c.state.position.y,
                    heading: c.state.heading,
                    speed: c.state.speed,
                    status: c.status,
                    progress: c.progress,
                    disengaged: disengaged.contains(&c.id),
                })
                .collect(),
            actors: snap
                .actors
                .iter()
                .map(|a| ActorPose {
                    id: a.id.clone(),
                    kind: format!("{:?}", a.kind).to_lowercase(),
                    x: a.position.x,
                    y: a.position.y,
                    heading: a.heading,
                })
                .collect(),
            lights: snap
                .lights
                .iter()
                .map(|l| LightInfo {
                    id: l.id.clone(),
                    state: l.state,
                    stop_line: l.stop_line,
                })
                .collect(),
        }
    }
}

/// Who an injected message is for.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Target {
    #[default]
    Broadcast,
    Agent(AgentId),
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Target::Broadcast => s.serialize_str("broadcast"),
            Target::Agent(a) => s.serialize_str(a.as_str()),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "broadcast" {
            Target::Broadcast
        } else {
            Target::Agent(AgentId::new(s))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorCommand {
    Inject {
        text: String,
        /// Sender position; the configured operator position when unset.
        #[serde(default)]
        position: Option<[f64; 2]>,
        #[serde(default)]
        target: Target,
    },
    Pause,
    /// Without an agent, resumes the episode; with one, re-engages it.
    Resume {
        #[serde(default)]
        agent: Option<AgentId>,
    },
    Disengage {
        agent: AgentId,
    },
}

/// Frames sent by the console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    OperatorCommand {
        #[serde(default)]
        id: Option<String>,
        command: OperatorCommand,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Versioned<T> {
    v: u32,
    #[serde(flatten)]
    body: T,
}

pub fn encode_frame(frame: &ServerFrame) -> String {
    serde_json::to_string(&Versioned {
        v: FEED_VERSION,
        body: frame.clone(),
    })
    .expect("frames serialize")
}

pub fn decode_server_frame(text: &str) -> Result<ServerFrame, String> {
    let v: Versioned<ServerFrame> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if v.v != FEED_VERSION {
        return Err(format!("unsupported feed version {}", v.v));
    }
    Ok(v.body)
}

pub fn encode_client_frame(frame: &ClientFrame) -> String {
    serde_json::to_string(&Versioned {
        v: FEED_VERSION,
        body: frame.clone(),
    })
    .expect("frames serialize")
}

/// Parses a console frame, returning the command id when it can be read
/// even if the rest is malformed.
pub fn decode_client_frame(text: &str) -> Result<(Option<String>, OperatorCommand), (Option<String>, String)> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| (None, format!("bad JSON: {e}")))?;
    let id = raw.get("id").and_then(|v| v.as_str()).map(str::to_string);
    let v: Versioned<ClientFrame> = serde_json::from_value(raw).map_err(|e| (id.clone(), e.to_string()))?;
    if v.v != FEED_VERSION {
        return Err((id, format!("unsupported feed version {}", v.v)));
    }
    let ClientFrame::OperatorCommand { id, command } = v.body;
    Ok((id, command))
}

/// A queued command with the client to acknowledge.
#[derive(Debug, Clone, PartialEq)]
pub struct Inbound {
    pub client: u64,
    pub id: Option<String>,
    pub command: OperatorCommand,
}

/// Fan-out of server frames to subscribers and fan-in of operator
/// commands. Shared by the episode loop and the socket threads.
#[derive(Default)]
pub struct FeedHub {
    subscribers: Mutex<BTreeMap<u64, mpsc::Sender<String>>>,
    next_client: AtomicU64,
    inbound: Mutex<VecDeque<Inbound>>,
    arrived: Condvar,
    hello: Mutex<Option<String>>,
}

impl FeedHub {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Registers a subscriber. Late joiners get the hello frame first.
    pub fn subscribe(&self) -> (u64, mpsc::Receiver<String>) {
        let id = self.next_client.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        if let Some(h) = self.hello.lock().expect("hello lock").clone() {
            let _ = tx.send(h);
        }
        self.subscribers.lock().expect("subscriber lock").insert(id, tx);
        (id, rx)
    }

    pub fn unsubscribe(&self, client: u64) {
        self.subscribers.lock().expect("subscriber lock").remove(&client);
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().expect("subscriber lock").len()
    }

    pub fn publish(&self, frame: &ServerFrame) {
        let text = encode_frame(frame);
        if matches!(frame, ServerFrame::Hello { .. }) {
            *self.hello.lock().expect("hello lock") = Some(text.clone());
        }
        self.subscribers
            .lock()
            .expect("subscriber lock")
            .retain(|_, tx| tx.send(text.clone()).is_ok());
    }

    pub fn send_to(&self, client: u64, frame: &ServerFrame) {
        let mut subs = self.subscribers.lock().expect("subscriber lock");
        if let Some(tx) = subs.get(&client) {
            if tx.send(encode_frame(frame)).is_err() {
                subs.remove(&client);
            }
        }
    }

    pub fn submit(&self, client: u64, id: Option<String>, command: OperatorCommand) {
        self.inbound
            .lock()
            .expect("inbound lock")
            .push_back(Inbound { client, id, command });
        self.arrived.notify_all();
    }

    /// Queues a raw console frame; malformed frames are rejected at once.
    pub fn submit_text(&self, client: u64, text: &str) {
        match decode_client_frame(text) {
            Ok((id, command)) => self.submit(client, id, command),
            Err((id, reason)) => self.send_to(
                client,
                &ServerFrame::Ack {
                    command_id: id,
                    ok: false,
                    reason: Some(reason),
                    delivered_to: vec![],
                    deferred: false,
                },
            ),
        }
    }

    pub fn drain(&self) -> Vec<Inbound> {
        self.inbound.lock().expect("inbound lock").drain(..).collect()
    }

    /// Blocks until a command is queued or `timeout` passes.
    pub fn wait(&self, timeout: Duration) {
        let q = self.inbound.lock().expect("inbound lock");
        if q.is_empty() {
            let _ = self.arrived.wait_timeout(q, timeout);
        }
    }
}

/// Running WebSocket server; stops when dropped.
pub struct FeedServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl FeedServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for FeedServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves `hub` on `addr` (port 0 picks a free port).
pub fn serve_feed(hub: Arc<FeedHub>, addr: &str) -> std::io::Result<FeedServer> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_l = stop.clone();
    let thread = std::thread::spawn(move || {
        let mut conns: Vec<JoinHandle<()>> = Vec::new();
        while !stop_l.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let (hub, stop) = (hub.clone(), stop_l.clone());
                    conns.push(std::thread::spawn(move || connection(stream, hub, stop)));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => {
                    log::warn!("feed accept failed: {e}");
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        }
        for c in conns {
            let _ = c.join();
        }
    });
    Ok(FeedServer {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

fn connection(stream: TcpStream, hub: Arc<FeedHub>, stop: Arc<AtomicBool>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("feed handshake failed: {e}");
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(Duration::from_millis(20)));
    let (client, rx) = hub.subscribe();
    'outer: while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(t)) => hub.submit_text(client, &t),
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        while let Ok(frame) = rx.try_recv() {
            if ws.send(Message::Text(frame)).is_err() {
                break 'outer;
            }
        }
    }
    hub.unsubscribe(client);
    let _ = ws.close(None);
    let _ = ws.flush();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip_with_version() {
        let f = ServerFrame::Ack {
            command_id: Some("c1".into()),
            ok: true,
            reason: None,
            delivered_to: vec!["0".into()],
            deferred: false,
        };
        let text = encode_frame(&f);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["v"], 1);
        assert_eq!(v["type"], "ack");
        assert_eq!(decode_server_frame(&text).unwrap(), f);
        assert!(decode_server_frame(&text.replace("\"v\":1", "\"v\":2")).is_err());
    }

    #[test]
    fn client_frames_parse() {
        let t = r#"{"v":1,"type":"operator_command","id":"a","command":{"kind":"inject","text":"Please move slowly to the side","position":[1.0,2.0],"target":"1"}}"#;
        let (id, c) = decode_client_frame(t).unwrap();
        assert_eq!(id.as_deref(), Some("a"));
        assert_eq!(
            c,
            OperatorCommand::Inject {
                text: "Please move slowly to the side".into(),
                position: Some([1.0, 2.0]),
                target: Target::Agent("1".into()),
            }
        );
        let (_, c) = decode_client_frame(r#"{"v":1,"type":"operator_command","command":{"kind":"resume"}}"#).unwrap();
        assert_eq!(c, OperatorCommand::Resume { agent: None });
        let bad = decode_client_frame(r#"{"v":1,"type":"operator_command","id":"z","command":{"kind":"teleport"}}"#);
        assert_eq!(bad.unwrap_err().0.as_deref(), Some("z"));
        assert!(decode_client_frame("not json").is_err());
        let round = ClientFrame::OperatorCommand {
            id: None,
            command: OperatorCommand::Disengage { agent: "0".into() },
        };
        assert_eq!(decode_client_frame(&encode_client_frame(&round)).unwrap().1, OperatorCommand::Disengage { agent: "0".into() });
    }

    #[test]
    fn hub_acks_malformed_frames_and_queues_good_ones() {
        let hub = FeedHub::new();
        let (c, rx) = hub.subscribe();
        hub.submit_text(c, "{");
        match decode_server_frame(&rx.try_recv().unwrap()).unwrap() {
            ServerFrame::Ack { ok, reason, .. } => assert!(!ok && reason.is_some()),
            f => panic!("{f:?}"),
        }
        hub.submit_text(c, r#"{"v":1,"type":"operator_command","command":{"kind":"pause"}}"#);
        assert_eq!(hub.drain().len(), 1);
        assert!(rx.try_recv().is_err());
        hub.publish(&ServerFrame::Hello {
            scenario: "s".into(),
            decision_tick: 1.0,
            lanes: vec![],
            routes: vec![],
        });
        let (_, late) = hub.subscribe();
        assert!(late.try_recv().unwrap().contains("\"hello\""));
    }
}
