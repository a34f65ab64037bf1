//! Natural-language information packets and their canonical wire encoding.
//!
//! Payload layout (UTF-8, `\n` line endings):
//!
//! ```text
//! Agent <id>, located at: [<x>, <y>], current speed: <v>m/s, acceleration: <a>m/s^2, timestamp: <t>s.
//!
//! It's scene description:
//! <scene text>
//!
//! It's object description:
//! <objects text>
//!
//! It's target description:
//! <goal text>
//!
//! It's intent description:
//! <intent text>
//! ```
//!
//! Numbers use the shortest representation that parses back to the same
//! `f64`, so metadata survives a round trip bit-exactly. A packet whose four
//! texts are all empty encodes as the metadata line alone. Over-budget
//! packets lose text from the end of sections in budget order, each cut
//! section ending with [`TRUNCATION_MARKER`].

use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world_sim::Vec2;
use crate::AgentId;

pub const TRUNCATION_MARKER: &str = "…";
pub const DEFAULT_MAX_BYTES: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum LangPackError {
    #[error("invalid packet: {0}")]
    InvalidPacket(String),
    #[error("budget of {budget} bytes is smaller than the {needed}-byte metadata line")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("mode {0:?} requires a non-empty image")]
    MissingImage(MessageMode),
    #[error("mode {0:?} carries no image")]
    UnexpectedImage(MessageMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Section {
    #[serde(rename = "scene")]
    Scene,
    #[serde(rename = "objects")]
    Objects,
    #[serde(rename = "goal")]
    Goal,
    #[serde(rename = "intent")]
    Intent,
}

impl Section {
    /// Wire order of the sections.
    pub const LAYOUT: [Section; 4] = [Section::Scene, Section::Objects, Section::Goal, Section::Intent];

    pub fn header(self) -> &'static str {
        match self {
            Section::Scene => "It's scene description:",
            Section::Objects => "It's object description:",
            Section::Goal => "It's target description:",
            Section::Intent => "It's intent description:",
        }
    }
}

/// What a broadcast carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "langpack")]
    LangPack,
    #[serde(rename = "image+langpack")]
    ImageLangPack,
}

impl MessageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageMode::None => "none",
            MessageMode::Image => "image",
            MessageMode::LangPack => "langpack",
            MessageMode::ImageLangPack => "image+langpack",
        }
    }

    pub fn carries_text(self) -> bool {
        matches!(self, MessageMode::LangPack | MessageMode::ImageLangPack)
    }

    pub fn carries_image(self) -> bool {
        matches!(self, MessageMode::Image | MessageMode::ImageLangPack)
    }
}

impl std::str::FromStr for MessageMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(MessageMode::None),
            "image" => Ok(MessageMode::Image),
            "langpack" => Ok(MessageMode::LangPack),
            "image+langpack" => Ok(MessageMode::ImageLangPack),
            other => Err(format!("unknown message mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangPackPacket {
    pub agent_id: AgentId,
    pub timestamp: f64,
    pub location: Vec2,
    pub speed: f64,
    pub acceleration: f64,
    #[serde(default)]
    pub scene_desc: String,
    #[serde(default)]
    pub objects_desc: String,
    #[serde(default)]
    pub goal_desc: String,
    #[serde(default)]
    pub intent_desc: String,
}

impl LangPackPacket {
    pub fn section(&self, s: Section) -> &str {
        match s {
            Section::Scene => &self.scene_desc,
            Section::Objects => &self.objects_desc,
            Section::Goal => &self.goal_desc,
            Section::Intent => &self.intent_desc,
        }
    }

    fn section_mut(&mut self, s: Section) -> &mut String {
        match s {
            Section::Scene => &mut self.scene_desc,
            Section::Objects => &mut self.objects_desc,
            Section::Goal => &mut self.goal_desc,
            Section::Intent => &mut self.intent_desc,
        }
    }

    pub fn texts_empty(&self) -> bool {
        Section::LAYOUT.iter().all(|s| self.section(*s).is_empty())
    }

    /// True when metadata fields are bit-identical.
    pub fn same_metadata(&self, o: &LangPackPacket) -> bool {
        self.agent_id == o.agent_id
            && self.timestamp.to_bits() == o.timestamp.to_bits()
            && self.location.x.to_bits() == o.location.x.to_bits()
            && self.location.y.to_bits() == o.location.y.to_bits()
            && self.speed.to_bits() == o.speed.to_bits()
            && self.acceleration.to_bits() == o.acceleration.to_bits()
    }

    pub fn validate(&self) -> Result<(), LangPackError> {
        let bad = |m: String| Err(LangPackError::InvalidPacket(m));
        if !self.agent_id.is_wire_safe() {
            return bad(format!("agent id {:?} is not wire safe", self.agent_id.as_str()));
        }
        let nums = [
            self.timestamp,
            self.location.x,
            self.location.y,
            self.speed,
            self.acceleration,
        ];
        if !nums.iter().all(|v| v.is_finite()) {
            return bad("metadata must be finite".into());
        }
        for s in Section::LAYOUT {
            let text = self.section(s);
            if text.contains('\r') {
                return bad(format!("{s:?} text contains a carriage return"));
            }
            if text.lines().any(|l| Section::LAYOUT.iter().any(|h| l == h.header())) {
                return bad(format!("{s:?} text contains a section header line"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBudget {
    pub max_bytes: usize,
    /// Sections are cut in this order until the payload fits.
    pub truncation_order: [Section; 4],
}

impl Default for SizeBudget {
    fn default() -> Self {
        SizeBudget {
            max_bytes: DEFAULT_MAX_BYTES,
            truncation_order: [Section::Objects, Section::Scene, Section::Intent, Section::Goal],
        }
    }
}

impl SizeBudget {
    pub fn bytes(max_bytes: usize) -> Self {
        SizeBudget {
            max_bytes,
            ..Default::default()
        }
    }
}

/// One broadcast unit. `size_bytes` always equals the payload length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMessage {
    payload: String,
    size_bytes: usize,
    #[serde(skip)]
    image: Option<Arc<Vec<u8>>>,
    image_bytes: usize,
    mode: MessageMode,
}

impl EncodedMessage {
    /// Builds a message enforcing the mode contract: image modes need a
    /// non-empty image, other modes must not carry one. Modes without text
    /// drop the payload.
    pub fn new(
        mode: MessageMode,
        payload: String,
        image: Option<Arc<Vec<u8>>>,
    ) -> Result<Self, LangPackError> {
        let image = image.filter(|i| !i.is_empty());
        if mode.carries_image() && image.is_none() {
            return Err(LangPackError::MissingImage(mode));
        }
        if !mode.carries_image() && image.is_some() {
            return Err(LangPackError::UnexpectedImage(mode));
        }
        let payload = if mode.carries_text() { payload } else { String::new() };
        Ok(EncodedMessage {
            size_bytes: payload.len(),
            image_bytes: image.as_ref().map_or(0, |i| i.len()),
            payload,
            image,
            mode,
        })
    }

    pub fn image_only(image: Arc<Vec<u8>>) -> Result<Self, LangPackError> {
        Self::new(MessageMode::Image, String::new(), Some(image))
    }

    /// Attaches a camera frame to a text message.
    pub fn with_image(self, image: Arc<Vec<u8>>) -> Result<Self, LangPackError> {
        Self::new(MessageMode::ImageLangPack, self.payload, Some(image))
    }

    pub fn payload(&self) -> &str {
        &self.payload
    }

    pub fn size_bytes(&self) -> usize {
        self.size_bytes
    }

    pub fn image(&self) -> Option<&Arc<Vec<u8>>> {
        self.image.as_ref()
    }

    pub fn image_bytes(&self) -> usize {
        self.image_bytes
    }

    pub fn mode(&self) -> MessageMode {
        self.mode
    }

    pub fn total_bytes(&self) -> usize {
        self.size_bytes + self.image_bytes
    }

    /// Decodes the text part, if the mode has one.
    pub fn packet(&self) -> Option<Result<LangPackPacket, LangPackError>> {
        self.mode.carries_text().then(|| decode(self.payload.as_bytes()))
    }
}

/// Payload plus attachment size in kilobytes (1 KB = 1024 bytes).
pub fn measure(msg: &EncodedMessage) -> f64 {
    msg.total_bytes() as f64 / 1024.0
}

fn metadata_line(p: &LangPackPacket) -> String {
    format!(
        "Agent {}, located at: [{}, {}], current speed: {}m/s, acceleration: {}m/s^2, timestamp: {}s.",
        p.agent_id, p.location.x, p.location.y, p.speed, p.acceleration, p.timestamp
    )
}

fn layout(meta: &str, p: &LangPackPacket) -> String {
    let mut out = String::with_capacity(meta.len() + 128);
    out.push_str(meta);
    out.push('\n');
    if p.texts_empty() {
        return out;
    }
    for s in Section::LAYOUT {
        let _ = write!(out, "\n{}\n{}\n", s.header(), p.section(s));
    }
    out
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    i = i.min(s.len());
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

/// Renders `packet` in the canonical layout within `budget`.
pub fn encode_payload(packet: &LangPackPacket, budget: &SizeBudget) -> Result<String, LangPackError> {
    packet.validate()?;
    let meta = metadata_line(packet);
    let meta_only = meta.len() + 1;
    if budget.max_bytes < meta_only {
        return Err(LangPackError::BudgetTooSmall {
            budget: budget.max_bytes,
            needed: meta_only,
        });
    }
    let mut p = packet.clone();
    let mut out = layout(&meta, &p);
    for s in budget.truncation_order {
        if out.len() <= budget.max_bytes {
            return Ok(out);
        }
        let over = out.len() - budget.max_bytes;
        let text = p.section_mut(s);
        if text.is_empty() {
            continue;
        }
        let keep = text.len().saturating_sub(over + TRUNCATION_MARKER.len());
        let cut = floor_char_boundary(text, keep);
        text.truncate(cut);
        text.push_str(TRUNCATION_MARKER);
        out = layout(&meta, &p);
    }
    if out.len() <= budget.max_bytes {
        Ok(out)
    } else {
        Ok(format!("{meta}\n"))
    }
}

/// Encodes `packet` as a text-only message.
pub fn encode(packet: &LangPackPacket, budget: &SizeBudget) -> Result<EncodedMessage, LangPackError> {
    EncodedMessage::new(MessageMode::LangPack, encode_payload(packet, budget)?, None)
}

fn metadata_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"(-?(?:\d+(?:\.\d+)?|inf|NaN))";
        Regex::new(&format!(
            r"^Agent ([A-Za-z0-9_-]+), located at: \[{num}, {num}\], current speed: {num}m/s, acceleration: {num}m/s\^2, timestamp: {num}s\.$"
        ))
        .expect("metadata grammar")
    })
}

fn malformed(m: impl Into<String>) -> LangPackError {
    LangPackError::Malformed(m.into())
}

/// Parses a canonical payload back into a packet. Truncated sections come
/// back marker-terminated.
pub fn decode(payload: &[u8]) -> Result<LangPackPacket, LangPackError> {
    let text = std::str::from_utf8(payload).map_err(|_| malformed("payload is not UTF-8"))?;
    let (meta, rest) = text
        .split_once('\n')
        .ok_or_else(|| malformed("missing metadata line"))?;
    let caps = metadata_re()
        .captures(meta)
        .ok_or_else(|| malformed("missing metadata line"))?;
    let num = |i: usize| -> Result<f64, LangPackError> {
        let v: f64 = caps[i].parse().map_err(|_| malformed("bad metadata number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(malformed("non-finite metadata"))
        }
    };
    let mut p = LangPackPacket {
        agent_id: AgentId::new(&caps[1]),
        location: Vec2::new(num(2)?, num(3)?),
        speed: num(4)?,
        acceleration: num(5)?,
        timestamp: num(6)?,
        scene_desc: String::new(),
        objects_desc: String::new(),
        goal_desc: String::new(),
        intent_desc: String::new(),
    };
    if rest.is_empty() {
        return Ok(p);
    }
    let mut cursor = rest;
    for (i, s) in Section::LAYOUT.iter().enumerate() {
        let head = format!("\n{}\n", s.header());
        cursor = cursor
            .strip_prefix(head.as_str())
            .ok_or_else(|| malformed(format!("expected {:?} section", s.header())))?;
        let end = match Section::LAYOUT.get(i + 1) {
            Some(next) => cursor
                .find(&format!("\n\n{}\n", next.header()))
                .ok_or_else(|| malformed(format!("expected {:?} section", next.header())))?,
            None => cursor
                .strip_suffix('\n')
                .map(|c| c.len())
                .ok_or_else(|| malformed("payload must end with a newline"))?,
        };
        *p.section_mut(*s) = cursor[..end].to_string();
        cursor = &cursor[end + 1..];
    }
    if !cursor.is_empty() {
        return Err(malformed("trailing bytes after intent section"));
    }
    Ok(p)
}
