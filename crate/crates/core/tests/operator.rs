mod common;

use std::net::TcpStream;
use std::sync::mpsc::Receiver;
use std::time::{Duration, Instant};

use langcoop::harness::feed::{decode_server_frame, encode_client_frame, ClientFrame};
use langcoop::harness::{
    run_episode, run_episode_with_feed, serve_feed, EpisodeResult, Fallback, FeedHub, OperatorCommand, RunConfig,
    ServerFrame, Target,
};
use langcoop::langpack::MessageMode;
use langcoop::signals::ControlCommand;
use langcoop::AgentId;
use tungstenite::Message;

const SIDE: &str = "Please move slowly to the side";

fn cfg() -> RunConfig {
    let mut c = common::config("intent_propagation");
    c.message = MessageMode::LangPack;
    c.timeout = Some(12.0);
    c
}

fn inject(text: &str, position: [f64; 2], target: Target) -> OperatorCommand {
    OperatorCommand::Inject {
        text: text.into(),
        position: Some(position),
        target,
    }
}

fn acks(rx: &Receiver<String>) -> Vec<ServerFrame> {
    rx.try_iter()
        .map(|t| decode_server_frame(&t).unwrap())
        .filter(|f| matches!(f, ServerFrame::Ack { .. }))
        .collect()
}

fn operator_ticks(r: &EpisodeResult, agent: &str) -> Vec<u64> {
    r.decisions
        .iter()
        .filter(|d| d.agent.as_str() == agent && d.received.iter().any(|s| s.as_str() == "operator"))
        .map(|d| d.tick)
        .collect()
}

#[test]
fn in_range_injection_reaches_the_next_decision_context() {
    let hub = FeedHub::new();
    let (client, rx) = hub.subscribe();
    hub.submit(client, Some("c1".into()), inject(SIDE, [5.0, 5.0], Target::Agent(AgentId::new("0"))));
    let r = run_episode_with_feed(&cfg(), Some(hub)).unwrap();

    assert_eq!(operator_ticks(&r, "0"), vec![0]);
    assert!(operator_ticks(&r, "1").is_empty(), "targeted at agent 0 only");
    let d = r.decisions.iter().find(|d| d.tick == 0 && d.agent.as_str() == "0").unwrap();
    assert!(d.received_intents.iter().any(|i| i == SIDE));
    let prompt = r
        .transcripts
        .iter()
        .find(|t| t.tick == 0 && t.agent.as_str() == "0" && t.purpose.starts_with("decision"))
        .unwrap();
    assert!(prompt.messages.iter().any(|m| m.content.contains(SIDE)));

    let a = acks(&rx);
    assert_eq!(a.len(), 1, "{a:?}");
    match &a[0] {
        ServerFrame::Ack {
            command_id,
            ok,
            delivered_to,
            deferred,
            ..
        } => {
            assert_eq!(command_id.as_deref(), Some("c1"));
            assert!(ok);
            assert!(!deferred);
            assert_eq!(delivered_to, &vec![AgentId::new("0")]);
        }
        f => panic!("{f:?}"),
    }
    assert_eq!(r.operator.len(), 1);
}

#[test]
fn injection_from_300_m_reaches_nobody() {
    let hub = FeedHub::new();
    let (client, rx) = hub.subscribe();
    hub.submit(client, Some("far".into()), inject(SIDE, [-300.0, 0.0], Target::Broadcast));
    let r = run_episode_with_feed(&cfg(), Some(hub)).unwrap();
    assert!(operator_ticks(&r, "0").is_empty() && operator_ticks(&r, "1").is_empty());
    match &acks(&rx)[..] {
        [ServerFrame::Ack { ok: true, delivered_to, .. }] => assert!(delivered_to.is_empty()),
        a => panic!("{a:?}"),
    }
    assert!(r.log.channel.iter().all(|e| e.sender.as_str() != "operator"));
}

#[test]
fn range_override_delivers_from_anywhere() {
    let hub = FeedHub::new();
    let (client, rx) = hub.subscribe();
    hub.submit(client, None, inject(SIDE, [-300.0, 0.0], Target::Broadcast));
    let mut c = cfg();
    c.operator.ignore_range = true;
    let r = run_episode_with_feed(&c, Some(hub)).unwrap();
    assert_eq!(operator_ticks(&r, "0"), vec![0]);
    assert_eq!(operator_ticks(&r, "1"), vec![0]);
    assert_eq!(acks(&rx).len(), 1);
}

#[test]
fn malformed_commands_are_rejected_and_leave_the_run_alone() {
    let baseline = run_episode(&cfg()).unwrap();
    let hub = FeedHub::new();
    let (client, rx) = hub.subscribe();
    hub.submit_text(client, "{not json");
    hub.submit_text(client, r#"{"v":1,"type":"operator_command","id":"x","command":{"kind":"warp"}}"#);
    hub.submit(client, Some("e".into()), inject("   ", [0.0, 0.0], Target::Broadcast));
    hub.submit(client, Some("u".into()), inject(SIDE, [0.0, 0.0], Target::Agent(AgentId::new("9"))));
    hub.submit(client, Some("d".into()), OperatorCommand::Disengage { agent: AgentId::new("9") });
    let r = run_episode_with_feed(&cfg(), Some(hub)).unwrap();
    let a = acks(&rx);
    assert_eq!(a.len(), 5);
    for f in &a {
        match f {
            ServerFrame::Ack { ok, reason, .. } => {
                assert!(!ok);
                assert!(reason.as_deref().is_some_and(|s| !s.is_empty()));
            }
            f => panic!("{f:?}"),
        }
    }
    assert!(matches!(&a[1], ServerFrame::Ack { command_id: Some(id), .. } if id == "x"));
    assert_eq!(r.trajectory, baseline.trajectory);
    assert_eq!(r.log.channel, baseline.log.channel);
}

#[test]
fn ignored_injections_leave_physics_unchanged() {
    let baseline = run_episode(&cfg()).unwrap();
    let hub = FeedHub::new();
    let (client, _rx) = hub.subscribe();
    hub.submit(client, None, inject("Lovely weather for a drive.", [5.0, 0.0], Target::Broadcast));
    let r = run_episode_with_feed(&cfg(), Some(hub)).unwrap();
    assert_eq!(operator_ticks(&r, "0"), vec![0]);
    assert_ne!(r.log.channel, baseline.log.channel);
    assert_eq!(r.trajectory, baseline.trajectory);
}

#[test]
fn paused_injections_are_deferred_until_resume() {
    let hub = FeedHub::new();
    let (client, rx) = hub.subscribe();
    hub.submit(client, Some("i".into()), inject(SIDE, [5.0, 0.0], Target::Broadcast));
    hub.submit(client, Some("r".into()), OperatorCommand::Resume { agent: None });
    let mut c = cfg();
    c.start_paused = true;
    let r = run_episode_with_feed(&c, Some(hub)).unwrap();
    let a = acks(&rx);
    assert_eq!(a.len(), 2, "one ack per command");
    assert!(matches!(&a[0], ServerFrame::Ack { ok: true, deferred: true, delivered_to, .. } if delivered_to.is_empty()));
    assert_eq!(operator_ticks(&r, "0"), vec![0]);
}

#[test]
fn disengage_holds_safe_stop_until_resumed() {
    let hub = FeedHub::new();
    let (client, rx) = hub.subscribe();
    hub.submit(client, Some("off".into()), OperatorCommand::Disengage { agent: AgentId::new("0") });
    let mut c = cfg();
    c.timeout = Some(30.0);
    c.pace = 0.02;
    let feeder = {
        let hub = hub.clone();
        std::thread::spawn(move || {
            // Re-engage once the disengaged CAV has come to rest.
            let deadline = Instant::now() + Duration::from_secs(20);
            while Instant::now() < deadline {
                if let Ok(t) = rx.recv_timeout(Duration::from_millis(200)) {
                    if let Ok(ServerFrame::Snapshot { cavs, tick, .. }) = decode_server_frame(&t) {
                        let a = cavs.iter().find(|c| c.id.as_str() == "0").unwrap();
                        if a.disengaged && a.speed < 0.05 && tick >= 3 {
                            hub.submit(client, Some("on".into()), OperatorCommand::Resume { agent: Some(AgentId::new("0")) });
                            return rx;
                        }
                    }
                }
            }
            rx
        })
    };
    let r = run_episode_with_feed(&c, Some(hub)).unwrap();
    let rx = feeder.join().unwrap();
    let _ = acks(&rx);
    let resumed_at = r
        .operator
        .iter()
        .find(|o| o.command_id.as_deref() == Some("on"))
        .expect("resume was processed")
        .tick;
    let mine: Vec<_> = r.decisions.iter().filter(|d| d.agent.as_str() == "0").collect();
    for d in &mine {
        let off = matches!(d.fallback, Some(Fallback::Disengaged));
        assert_eq!(off, d.tick < resumed_at, "tick {}", d.tick);
    }
    let resume_time = resumed_at as f64;
    for t in &r.trajectory {
        let a = t.agents.iter().find(|a| a.id.as_str() == "0").unwrap();
        if t.time <= resume_time + 1e-9 {
            let cmd = ControlCommand {
                steer: a.steer,
                throttle: a.throttle,
                brake: a.brake,
            };
            assert_eq!(cmd, ControlCommand::SAFE_STOP, "t={}", t.time);
        }
    }
    let later = r
        .trajectory
        .iter()
        .filter(|t| t.time > resume_time + 3.0)
        .flat_map(|t| t.agents.iter().filter(|a| a.id.as_str() == "0"))
        .map(|a| a.speed)
        .fold(0.0, f64::max);
    assert!(later > 1.0, "moves again after resume: {later}");
}

fn read_frame(ws: &mut tungstenite::WebSocket<TcpStream>) -> ServerFrame {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return decode_server_frame(&t).unwrap(),
            _ => continue,
        }
    }
}

#[test]
fn websocket_client_drives_an_episode() {
    let hub = FeedHub::new();
    let server = serve_feed(hub.clone(), "127.0.0.1:0").unwrap();
    let addr = server.local_addr();

    let mut c = cfg();
    c.start_paused = true;
    let run = {
        let hub = hub.clone();
        std::thread::spawn(move || run_episode_with_feed(&c, Some(hub)).unwrap())
    };

    let stream = TcpStream::connect(addr).unwrap();
    let (mut ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).unwrap();
    let mut frames = vec![read_frame(&mut ws)];
    assert!(matches!(frames[0], ServerFrame::Hello { .. }), "{:?}", frames[0]);

    let send = |ws: &mut tungstenite::WebSocket<TcpStream>, id: &str, command: OperatorCommand| {
        let f = ClientFrame::OperatorCommand {
            id: Some(id.into()),
            command,
        };
        ws.send(Message::Text(encode_client_frame(&f))).unwrap();
    };
    send(&mut ws, "w1", inject(SIDE, [5.0, 0.0], Target::Agent(AgentId::new("1"))));
    send(&mut ws, "w2", OperatorCommand::Resume { agent: None });
    ws.send(Message::Text("garbage".into())).unwrap();

    let r = run.join().unwrap();
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(500))).unwrap();
    while let Ok(m) = ws.read() {
        if let Message::Text(t) = m {
            frames.push(decode_server_frame(&t).unwrap());
        }
    }
    drop(server);

    let acks: Vec<_> = frames.iter().filter(|f| matches!(f, ServerFrame::Ack { .. })).collect();
    assert_eq!(acks.len(), 3, "{acks:?}");
    assert!(frames.iter().any(|f| matches!(f, ServerFrame::Snapshot { paused: true, .. })));
    assert!(frames.iter().any(|f| matches!(f, ServerFrame::Snapshot { tick: 3, paused: false, .. })));
    assert!(frames.iter().any(|f| matches!(f, ServerFrame::MetricsUpdate { .. })));
    assert!(frames.iter().any(|f| matches!(
        f,
        ServerFrame::MessageEvent { sender, receiver, preview, .. }
            if sender.as_str() == "operator" && receiver.as_str() == "1" && preview == SIDE
    )));
    assert_eq!(operator_ticks(&r, "1"), vec![0]);
}
