use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;

use super::*;
use crate::backends::{Backend, Completion, ScriptedBackend};
use crate::fusion::Fuser;
use crate::langpack::{encode, SizeBudget};
use crate::testutil::{observation, packet};
use crate::world_sim::{EgoPoint, Vec2};

struct Echo {
    id: String,
    calls: AtomicUsize,
}

impl Echo {
    fn new(id: &str) -> Arc<Self> {
        Arc::new(Echo {
            id: id.into(),
            calls: AtomicUsize::new(0),
        })
    }
}

impl Backend for Echo {
    fn id(&self) -> &str {
        &self.id
    }
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Completion::text(format!("{} answered {}", self.id, req.purpose.label())))
    }
}

struct Blank;

impl Backend for Blank {
    fn id(&self) -> &str {
        "blank"
    }
    fn complete(&self, _: &CompletionRequest) -> Result<Completion, BackendError> {
        Ok(Completion::text("  \n"))
    }
}

fn site(registry: &Registry) -> CallSite<'_> {
    CallSite {
        registry,
        tick: 3,
        limits: VehicleLimits::default(),
    }
}

#[test]
fn goal_rendering() {
    let mut obs = observation(0.0);
    obs.goal_offset = EgoPoint::new(0.154, 32.398);
    assert_eq!(
        goal_text(&obs),
        "The target is 0.154 meters to my right and 32.398 meters to my front. \
         This target is not the end of my route, so I keep driving after reaching it."
    );
    obs.goal_offset = EgoPoint::new(-2.0, -1.5);
    obs.goal_is_endpoint = true;
    let t = goal_text(&obs);
    assert!(t.starts_with("The target is 2.000 meters to my left and 1.500 meters behind me."));
    assert!(t.contains("I must stop there"));
}

#[test]
fn style_parsing() {
    assert_eq!("concise".parse::<PromptStyle>().unwrap(), PromptStyle::ConciseCot);
    assert_eq!("cot".parse::<PromptStyle>().unwrap(), PromptStyle::Cot);
    assert_eq!("naive".parse::<PromptStyle>().unwrap(), PromptStyle::Naive);
    assert!("fancy".parse::<PromptStyle>().is_err());
}

#[test]
fn stage_prompts_carry_inputs() {
    let mut obs = observation(4.0);
    obs.nearby_objects
        .push(crate::testutil::object("p1", crate::world_sim::ObjectClass::Pedestrian, 1.0, 8.0));
    let prior = M3CoTResult {
        scene_desc: "Wet road.".into(),
        ..Default::default()
    };
    let m = stage_messages(StageKind::ObjectDescription, &obs, &prior, PromptStyle::Cot);
    assert_eq!(m.len(), 2);
    let user = &m[1].content;
    assert!(user.contains("Wet road."));
    assert!(user.contains("pedestrian p1: 8.000 meters to my front and 1.000 meters to my right"));
    assert!(!user.contains("{{"));
}

proptest! {
    #[test]
    fn concise_differs_only_by_suffix(speed in 0.0f64..20.0, right in -30.0f64..30.0, front in -30.0f64..30.0, idx in 0usize..4) {
        let mut obs = observation(speed);
        obs.goal_offset = EgoPoint::new(right, front);
        let stage = StageKind::ALL[idx];
        let prior = M3CoTResult { scene_desc: "s".into(), objects_desc: "o".into(), goal_desc: "g".into(), ..Default::default() };
        let cot = stage_messages(stage, &obs, &prior, PromptStyle::Cot);
        let concise = stage_messages(stage, &obs, &prior, PromptStyle::ConciseCot);
        prop_assert_eq!(&cot[0], &concise[0]);
        prop_assert_eq!(format!("{}{}", cot[1].content, CONCISE_SUFFIX), concise[1].content.clone());
    }
}

#[test]
fn pipeline_makes_four_stage_calls_then_one_decision() {
    let echo = Echo::new("m");
    let registry = Registry::new().with(echo.clone());
    let obs = observation(5.0);
    let s = site(&registry);
    let a = StageAssignment::uniform("m");
    let r = run_pipeline(&obs, &a, PromptStyle::Cot, &s).unwrap();
    assert_eq!(echo.calls.load(Ordering::SeqCst), 4);
    assert_eq!(r.scene_desc, "m answered scene_description");
    assert_eq!(r.intent_desc, "m answered future_intent");
    run_decision(&r, &[], &obs, Formulation::Control, PromptStyle::Cot, "m", vec![], &s).unwrap();
    assert_eq!(echo.calls.load(Ordering::SeqCst), 5);

    let recs = registry.transcripts().snapshot();
    let purposes: Vec<&str> = recs.iter().map(|r| r.purpose.as_str()).collect();
    assert_eq!(
        purposes,
        ["scene_description", "object_description", "navigation_goal", "future_intent", "decision_control"]
    );
    assert!(recs.iter().enumerate().all(|(i, r)| r.seq == i as u32 && r.tick == 3));
}

#[test]
fn naive_style_skips_stages() {
    let echo = Echo::new("m");
    let registry = Registry::new().with(echo.clone());
    let r = run_pipeline(&observation(5.0), &StageAssignment::uniform("m"), PromptStyle::Naive, &site(&registry)).unwrap();
    assert_eq!(r, M3CoTResult::default());
    assert_eq!(echo.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn mixed_routing_attributes_each_stage() {
    let (a, b) = (Echo::new("a"), Echo::new("b"));
    let registry = Registry::new().with(a.clone()).with(b.clone());
    let mut asg = StageAssignment::uniform("b");
    asg.scene_description = "a".into();
    asg.navigation_goal = "a".into();
    let r = run_pipeline(&observation(5.0), &asg, PromptStyle::Cot, &site(&registry)).unwrap();
    let ids: Vec<&str> = r.stages.iter().map(|s| s.backend_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "a", "b"]);
    assert_eq!(r.goal_desc, "a answered navigation_goal");
    assert_eq!(r.objects_desc, "b answered object_description");
    assert_eq!(calls_by_backend(&r), BTreeMap::from([("a".into(), 2), ("b".into(), 2)]));
    let recs = registry.transcripts().snapshot();
    assert!(recs.iter().all(|t| t.completion.starts_with(&t.backend_id)));
}

#[test]
fn stage_failures_name_stage_and_backend() {
    let registry = Registry::new().with(Arc::new(Blank));
    let e = run_pipeline(&observation(5.0), &StageAssignment::uniform("blank"), PromptStyle::Cot, &site(&registry))
        .unwrap_err();
    assert_eq!(e.stage, StageKind::SceneDescription);
    assert_eq!(e.backend_id, "blank");
    let e = run_pipeline(&observation(5.0), &StageAssignment::uniform("nope"), PromptStyle::Cot, &site(&registry))
        .unwrap_err();
    assert_eq!(e.cause, BackendError::Unknown("nope".into()));
}

#[test]
fn decision_prompt_embeds_received_packets() {
    let obs = observation(8.0);
    let intent = "1. Environment Check: ok\n4. Avoid Collisions: The car ahead is too close, slow down";
    let msg = encode(&packet("1", Vec2::new(0.0, 15.0), 2.0, 0.0, intent), &SizeBudget::default()).unwrap();
    let (fused, _) = Fuser::new().fuse(&obs.ego, 0.0, std::slice::from_ref(&msg));
    let own = M3CoTResult {
        scene_desc: "Clear.".into(),
        ..Default::default()
    };
    let p = build_decision_prompt(&own, &fused, &obs, Formulation::Control, PromptStyle::Cot, &VehicleLimits::default());
    assert!(p.contains("Avoid Collisions: The car ahead is too close, slow down"));
    assert!(p.contains(msg.payload()));
    assert!(p.contains("Agent 1, 15.000 m ahead, 0.000 m right"));
    assert!(p.contains("steering angle, throttle position, and brake pressure"));
    assert!(p.trim_end().ends_with("Drive safely and avoid collisions."));
    assert!(!p.contains("{{"));

    let naive = build_decision_prompt(&M3CoTResult::default(), &[], &obs, Formulation::Discrete, PromptStyle::Naive, &VehicleLimits::default());
    assert!(naive.contains("WAYPOINTS"));
    assert!(naive.contains("4 waypoints for the next 2 seconds, one every 0.5 s"));
    assert!(!naive.contains("My scene description"));
}

#[test]
fn scripted_pipeline_end_to_end() {
    let registry = Registry::new().with(Arc::new(ScriptedBackend::new("s", "follow_route").unwrap()));
    let obs = observation(5.0);
    let s = site(&registry);
    let r = run_pipeline(&obs, &StageAssignment::uniform("s"), PromptStyle::ConciseCot, &s).unwrap();
    assert!(r.scene_desc.contains("clear road, no nearby actors"));
    assert_eq!(r.goal_desc, goal_text(&obs));
    let out = run_decision(&r, &[], &obs, Formulation::Control, PromptStyle::ConciseCot, "s", vec![], &s).unwrap();
    assert!(crate::signals::parse_signal(&out, Formulation::Control).is_ok(), "{out}");
}
