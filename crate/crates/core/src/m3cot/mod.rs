//! The four-stage reasoning pipeline (scene, objects, navigation goal,
//! intent) with per-stage backend routing, and the decision prompt that
//! combines its output with received messages.
//!
//! Prompt templates are versioned text assets under `templates/v1`. The
//! concise style is the chain-of-thought style with [`CONCISE_SUFFIX`]
//! appended to every stage prompt; the naive style skips the stages.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, ChatMessage, CompletionRequest, PolicyContext, Purpose, Registry,
};
use crate::fusion::{aggregate, FusedPacket};
use crate::signals::{Formulation, WAYPOINT_COUNT, WAYPOINT_SPACING_S};
use crate::world_sim::{FrameRef, Observation, VehicleLimits};

pub const TEMPLATE_VERSION: &str = "v1";
pub const CONCISE_SUFFIX: &str = "\nPlease be very concise.";

mod templates {
    pub const SYSTEM: &str = include_str!("../../templates/v1/system.txt");
    pub const SCENE: &str = include_str!("../../templates/v1/cot/scene_description.txt");
    pub const OBJECTS: &str = include_str!("../../templates/v1/cot/object_description.txt");
    pub const GOAL: &str = include_str!("../../templates/v1/cot/navigation_goal.txt");
    pub const INTENT: &str = include_str!("../../templates/v1/cot/future_intent.txt");
    pub const COT_DECISION: &str = include_str!("../../templates/v1/cot/decision.txt");
    pub const NAIVE_DECISION: &str = include_str!("../../templates/v1/naive/decision.txt");
    pub const FORMAT_CONTROL: &str = include_str!("../../templates/v1/format/control.txt");
    pub const FORMAT_CONTINUOUS: &str = include_str!("../../templates/v1/format/continuous.txt");
    pub const FORMAT_DISCRETE: &str = include_str!("../../templates/v1/format/discrete.txt");
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    SceneDescription,
    ObjectDescription,
    NavigationGoal,
    FutureIntent,
}

impl StageKind {
    /// Execution order.
    pub const ALL: [StageKind; 4] = [
        StageKind::SceneDescription,
        StageKind::ObjectDescription,
        StageKind::NavigationGoal,
        StageKind::FutureIntent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::SceneDescription => "scene_description",
            StageKind::ObjectDescription => "object_description",
            StageKind::NavigationGoal => "navigation_goal",
            StageKind::FutureIntent => "future_intent",
        }
    }

    fn template(self) -> &'static str {
        match self {
            StageKind::SceneDescription => templates::SCENE,
            StageKind::ObjectDescription => templates::OBJECTS,
            StageKind::NavigationGoal => templates::GOAL,
            StageKind::FutureIntent => templates::INTENT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Naive,
    Cot,
    ConciseCot,
}

impl PromptStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::Naive => "naive",
            PromptStyle::Cot => "cot",
            PromptStyle::ConciseCot => "concise_cot",
        }
    }
}

impl std::str::FromStr for PromptStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "naive" => Ok(PromptStyle::Naive),
            "cot" => Ok(PromptStyle::Cot),
            "concise" | "concise_cot" => Ok(PromptStyle::ConciseCot),
            other => Err(format!("unknown prompt style {other:?}")),
        }
    }
}

/// Which backend serves each stage and the final decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageAssignment {
    pub scene_description: String,
    pub object_description: String,
    pub navigation_goal: String,
    pub future_intent: String,
    pub decision: String,
}

impl StageAssignment {
    pub fn uniform(id: &str) -> Self {
        StageAssignment {
            scene_description: id.into(),
            object_description: id.into(),
            navigation_goal: id.into(),
            future_intent: id.into(),
            decision: id.into(),
        }
    }

    pub fn stage(&self, s: StageKind) -> &str {
        match s {
            StageKind::SceneDescription => &self.scene_description,
            StageKind::ObjectDescription => &self.object_description,
            StageKind::NavigationGoal => &self.navigation_goal,
            StageKind::FutureIntent => &self.future_intent,
        }
    }

    pub fn backend_ids(&self) -> impl Iterator<Item = &str> {
        StageKind::ALL
            .into_iter()
            .map(|s| self.stage(s))
            .chain(std::iter::once(self.decision.as_str()))
    }

    pub fn validate(&self, registry: &Registry) -> Result<(), BackendError> {
        match self.backend_ids().find(|id| !registry.contains(id)) {
            Some(id) => Err(BackendError::Unknown(id.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: StageKind,
    pub backend_id: String,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct M3CoTResult {
    pub scene_desc: String,
    pub objects_desc: String,
    pub goal_desc: String,
    pub intent_desc: String,
    /// Stages that ran, in order.
    pub stages: Vec<StageOutcome>,
}

impl M3CoTResult {
    pub fn text(&self, s: StageKind) -> &str {
        match s {
            StageKind::SceneDescription => &self.scene_desc,
            StageKind::ObjectDescription => &self.objects_desc,
            StageKind::NavigationGoal => &self.goal_desc,
            StageKind::FutureIntent => &self.intent_desc,
        }
    }

    fn text_mut(&mut self, s: StageKind) -> &mut String {
        match s {
            StageKind::SceneDescription => &mut self.scene_desc,
            StageKind::ObjectDescription => &mut self.objects_desc,
            StageKind::NavigationGoal => &mut self.goal_desc,
            StageKind::FutureIntent => &mut self.intent_desc,
        }
    }

    /// Section labels with their texts, in stage order.
    pub fn sections(&self) -> [(&'static str, &str); 4] {
        [
            ("scene description", &self.scene_desc),
            ("object description", &self.objects_desc),
            ("target description", &self.goal_desc),
            ("intent description", &self.intent_desc),
        ]
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("stage {} via {backend_id}: {cause}", stage.as_str())]
pub struct StageError {
    pub stage: StageKind,
    pub backend_id: String,
    pub cause: BackendError,
}

/// Per-call bookkeeping shared by a tick's calls for one agent.
#[derive(Clone, Copy)]
pub struct CallSite<'a> {
    pub registry: &'a Registry,
    pub tick: u64,
    pub limits: VehicleLimits,
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.trim_end().to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

pub fn ego_text(obs: &Observation) -> String {
    let e = &obs.ego;
    format!(
        "My state: located at [{:.3}, {:.3}], current speed: {:.3}m/s, acceleration: {:.3}m/s^2, time: {:.3}s.",
        e.position.x, e.position.y, e.speed, e.acceleration, obs.sim_time
    )
}

/// Signed offset spoken as "<d> meters to my right/left".
fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn lateral(right: f64) -> String {
    let right = round3(right);
    format!("{:.3} meters to my {}", right.abs(), if right >= 0.0 { "right" } else { "left" })
}

fn longitudinal(front: f64) -> String {
    let front = round3(front);
    if front >= 0.0 {
        format!("{front:.3} meters to my front")
    } else {
        format!("{:.3} meters behind me", -front)
    }
}

/// The navigation target relative to the ego, rendered at 3 decimals.
pub fn goal_text(obs: &Observation) -> String {
    let g = obs.goal_offset;
    let tail = if obs.goal_is_endpoint {
        "This target is the end of my route, so I must stop there."
    } else {
        "This target is not the end of my route, so I keep driving after reaching it."
    };
    format!("The target is {} and {}. {tail}", lateral(g.right), longitudinal(g.front))
}

/// Perception summary used in the object stage prompt.
pub fn objects_text(obs: &Observation) -> String {
    if obs.nearby_objects.is_empty() {
        return "none".into();
    }
    obs.nearby_objects
        .iter()
        .map(|o| {
            let mut s = format!(
                "- {} {}: {} and {}, {}, relative speed {:.3} m/s",
                o.class.label(),
                o.id,
                longitudinal(o.relative.front),
                lateral(o.relative.right),
                o.motion.label(),
                o.relative_speed
            );
            if let Some(l) = o.light {
                s.push_str(&format!(", light is {l:?}").to_lowercase());
            }
            s
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Chat messages for one stage. Later stages see earlier outputs.
pub fn stage_messages(
    stage: StageKind,
    obs: &Observation,
    prior: &M3CoTResult,
    style: PromptStyle,
) -> Vec<ChatMessage> {
    let ego = ego_text(obs);
    let objects = objects_text(obs);
    let goal = goal_text(obs);
    let mut user = fill(
        stage.template(),
        &[
            ("ego", &ego),
            ("scene", &prior.scene_desc),
            ("objects", &objects),
            ("objects_desc", &prior.objects_desc),
            ("goal", &goal),
            ("goal_desc", &prior.goal_desc),
        ],
    );
    if style == PromptStyle::ConciseCot {
        user.push_str(CONCISE_SUFFIX);
    }
    vec![ChatMessage::system(templates::SYSTEM.trim_end()), ChatMessage::user(user)]
}

fn format_instruction(formulation: Formulation, limits: &VehicleLimits) -> String {
    match formulation {
        Formulation::Control => fill(templates::FORMAT_CONTROL, &[]),
        Formulation::Continuous => fill(
            templates::FORMAT_CONTINUOUS,
            &[("max_curvature", &format!("{:.3}", limits.max_curvature()))],
        ),
        Formulation::Discrete => fill(
            templates::FORMAT_DISCRETE,
            &[
                ("count", &WAYPOINT_COUNT.to_string()),
                ("horizon", &format!("{}", WAYPOINT_COUNT as f64 * WAYPOINT_SPACING_S)),
                ("spacing", &format!("{WAYPOINT_SPACING_S}")),
            ],
        ),
    }
}

/// The decision prompt: ego state, own sections, received packets under
/// sender headers, the goal, the output format and the safety instruction.
pub fn build_decision_prompt(
    own: &M3CoTResult,
    received: &[FusedPacket],
    obs: &Observation,
    formulation: Formulation,
    style: PromptStyle,
    limits: &VehicleLimits,
) -> String {
    let ctx = aggregate(own, received, obs);
    let template = if style == PromptStyle::Naive {
        templates::NAIVE_DECISION
    } else {
        templates::COT_DECISION
    };
    fill(
        template,
        &[
            ("context", ctx.text.trim_end()),
            ("goal", &goal_text(obs)),
            ("speed_limit", &format!("{:.3}", obs.speed_limit)),
            ("format", &format_instruction(formulation, limits)),
        ],
    )
}

fn request(
    messages: Vec<ChatMessage>,
    images: Vec<FrameRef>,
    purpose: Purpose,
    site: &CallSite,
    obs: &Observation,
    prior: &M3CoTResult,
    received: &[FusedPacket],
) -> CompletionRequest {
    CompletionRequest {
        messages,
        images,
        purpose,
        tick: site.tick,
        agent: obs.agent_id.clone(),
        policy: Some(Arc::new(PolicyContext {
            observation: obs.clone(),
            prior: prior.clone(),
            received: received.to_vec(),
            limits: site.limits,
        })),
    }
}

/// Runs one stage on `backend_id`. Empty completions count as failures.
pub fn run_stage(
    stage: StageKind,
    obs: &Observation,
    prior: &M3CoTResult,
    backend_id: &str,
    style: PromptStyle,
    site: &CallSite,
) -> Result<(String, StageOutcome), StageError> {
    let err = |cause| StageError {
        stage,
        backend_id: backend_id.to_string(),
        cause,
    };
    let req = request(
        stage_messages(stage, obs, prior, style),
        obs.image.iter().cloned().collect(),
        Purpose::Stage(stage),
        site,
        obs,
        prior,
        &[],
    );
    let c = site.registry.complete(backend_id, &req).map_err(err)?;
    let text = c.text.trim().to_string();
    if text.is_empty() {
        return Err(err(BackendError::Empty {
            backend_id: backend_id.to_string(),
        }));
    }
    Ok((
        text,
        StageOutcome {
            stage,
            backend_id: backend_id.to_string(),
            latency_s: c.latency_s,
        },
    ))
}

/// Runs the four stages in order; naive style makes no calls.
pub fn run_pipeline(
    obs: &Observation,
    assignment: &StageAssignment,
    style: PromptStyle,
    site: &CallSite,
) -> Result<M3CoTResult, StageError> {
    let mut result = M3CoTResult::default();
    if style == PromptStyle::Naive {
        return Ok(result);
    }
    for stage in StageKind::ALL {
        let (text, outcome) = run_stage(stage, obs, &result, assignment.stage(stage), style, site)?;
        *result.text_mut(stage) = text;
        result.stages.push(outcome);
    }
    Ok(result)
}

/// Asks the decision backend for a driving signal. `images` are the ego
/// frame plus any frames received from other vehicles.
#[allow(clippy::too_many_arguments)]
pub fn run_decision(
    own: &M3CoTResult,
    received: &[FusedPacket],
    obs: &Observation,
    formulation: Formulation,
    style: PromptStyle,
    backend_id: &str,
    images: Vec<FrameRef>,
    site: &CallSite,
) -> Result<String, BackendError> {
    let prompt = build_decision_prompt(own, received, obs, formulation, style, &site.limits);
    let req = request(
        vec![ChatMessage::system(templates::SYSTEM.trim_end()), ChatMessage::user(prompt)],
        images,
        Purpose::Decision(formulation),
        site,
        obs,
        own,
        received,
    );
    Ok(site.registry.complete(backend_id, &req)?.text)
}

/// Stage call counts per backend id, for routing checks.
pub fn calls_by_backend(result: &M3CoTResult) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in &result.stages {
        *m.entry(s.backend_id.clone()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests;
