//! Domain types shared by every stage of the agent loop.
//!
//! Everything here is an immutable value once built. Sessions produce new
//! turns and trajectories; nothing mutates a [`PageImage`] or [`Query`] after
//! construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use base64::Engine as _;
use image::RgbaImage;
use serde::{Deserialize, Serialize};

use crate::grammar::FormatError;
use crate::retrieval::CandidateSet;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("query id must not be empty")]
    EmptyQueryId,
    #[error("golden box document {0:?} is not listed in golden_doc_ids")]
    StrayGoldenBox(String),
    #[error("invalid box {0:?}: need x1 < x2 and y1 < y2")]
    InvalidBox([i64; 4]),
    #[error("page {0:?} has zero width or height")]
    EmptyPage(String),
}

/// Axis-aligned pixel box, origin top-left, `x2`/`y2` exclusive.
///
/// Construction only checks ordering. Parsed boxes may start outside the page
/// and are brought in bounds by `perception::clamp_bbox`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self, TypeError> {
        if x1 < x2 && y1 < y2 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(TypeError::InvalidBox([x1, y1, x2, y2]))
        }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = TypeError;

    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x1, self.y1, self.x2, self.y2)
    }
}

/// A user question plus its golden annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub reference_answer: String,
    #[serde(default)]
    pub golden_doc_ids: BTreeSet<String>,
    #[serde(default)]
    pub golden_boxes: BTreeMap<String, Vec<BBox>>,
}

impl Query {
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.id.is_empty() {
            return Err(TypeError::EmptyQueryId);
        }
        if let Some(stray) = self
            .golden_boxes
            .keys()
            .find(|k| !self.golden_doc_ids.contains(*k))
        {
            return Err(TypeError::StrayGoldenBox(stray.clone()));
        }
        Ok(())
    }
}

/// Where the pixels of a page live.
///
/// `Virtual` pages have dimensions but no raster; cropping them yields
/// another virtual page with the computed output size. The synthetic
/// micro-world uses virtual pages so training never touches pixels.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PixelSource {
    File {
        path: PathBuf,
    },
    Memory {
        #[serde(with = "png_base64")]
        png: Arc<RgbaImage>,
    },
    #[default]
    Virtual,
}

impl PartialEq for PixelSource {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (PixelSource::File { path: a }, PixelSource::File { path: b }) => a == b,
            (PixelSource::Memory { png: a }, PixelSource::Memory { png: b }) => {
                Arc::ptr_eq(a, b) || a.as_ref() == b.as_ref()
            }
            (PixelSource::Virtual, PixelSource::Virtual) => true,
            _ => false,
        }
    }
}

pub(crate) fn encode_png(img: &RgbaImage) -> Result<Vec<u8>, image::ImageError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

mod png_base64 {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(img: &Arc<RgbaImage>, s: S) -> Result<S::Ok, S::Error> {
        let bytes = encode_png(img).map_err(serde::ser::Error::custom)?;
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Arc<RgbaImage>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(de::Error::custom)?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(de::Error::custom)?;
        Ok(Arc::new(img.to_rgba8()))
    }
}

/// One corpus page (or a crop derived from one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageImage {
    pub doc_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub source: PixelSource,
    #[serde(default)]
    pub text_proxy: String,
}

impl PageImage {
    pub fn new(
        doc_id: impl Into<String>,
        width: u32,
        height: u32,
        text_proxy: impl Into<String>,
    ) -> Result<Self, TypeError> {
        let doc_id = doc_id.into();
        if width == 0 || height == 0 {
            return Err(TypeError::EmptyPage(doc_id));
        }
        Ok(Self {
            doc_id,
            width,
            height,
            source: PixelSource::Virtual,
            text_proxy: text_proxy.into(),
        })
    }

    pub fn with_source(mut self, source: PixelSource) -> Self {
        self.source = source;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// A parsed assistant action. Each variant carries exactly its own payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Search { query: String },
    Select { indices: Vec<usize> },
    Crop { boxes: Vec<BBox> },
    Answer { text: String },
    Malformed { errors: Vec<FormatError> },
}

impl Action {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Action::Search { .. } => "search",
            Action::Select { .. } => "select",
            Action::Crop { .. } => "crop",
            Action::Answer { .. } => "answer",
            Action::Malformed { .. } => "malformed",
        }
    }

    pub fn is_malformed(&self) -> bool {
        matches!(self, Action::Malformed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    #[serde(flatten)]
    pub action: Action,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PageImage>,
    /// Thought segment of an assistant turn, if one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ActionRecord>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
            thought: None,
            parsed: None,
        }
    }

    pub fn user_with_images(text: impl Into<String>, images: Vec<PageImage>) -> Self {
        Self {
            images,
            ..Self::user(text)
        }
    }

    pub fn assistant(
        text: impl Into<String>,
        thought: Option<String>,
        parsed: ActionRecord,
    ) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
            thought,
            parsed: Some(parsed),
        }
    }
}

/// The documents chosen by one Select action, tied to the search it consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub search_index: usize,
    pub doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedBox {
    pub doc_id: String,
    pub bbox: BBox,
}

/// An action that parsed but could not run in the current state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftError {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Answered,
    BudgetExhausted,
    #[default]
    None,
}

/// The five reward components with their weights and weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_pat: f64,
    pub r_ir: f64,
    pub r_sel: f64,
    pub r_crop: f64,
    pub r_ans: f64,
    pub lambdas: [f64; 5],
    pub total: f64,
}

impl RewardBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.r_pat, self.r_ir, self.r_sel, self.r_crop, self.r_ans]
    }

    /// Left-to-right weighted sum; the stored `total` is always produced by this.
    pub fn weighted_sum(components: [f64; 5], lambdas: [f64; 5]) -> f64 {
        let mut total = 0.0;
        for (c, l) in components.iter().zip(lambdas.iter()) {
            total += l * c;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: Query,
    pub turns: Vec<Turn>,
    pub candidate_history: Vec<CandidateSet>,
    pub selections: Vec<Selection>,
    pub predicted_boxes: Vec<PredictedBox>,
    pub final_answer: Option<String>,
    pub terminated: bool,
    pub termination: TerminationReason,
    #[serde(default)]
    pub soft_errors: Vec<SoftError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
}

impl Trajectory {
    pub fn new(query: Query) -> Self {
        Self {
            query,
            turns: Vec::new(),
            candidate_history: Vec::new(),
            selections: Vec::new(),
            predicted_boxes: Vec::new(),
            final_answer: None,
            terminated: false,
            termination: TerminationReason::None,
            soft_errors: Vec::new(),
            policy_error: None,
            reward: None,
        }
    }

    pub fn assistant_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::Assistant)
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.assistant_turns()
            .filter_map(|t| t.parsed.as_ref().map(|p| &p.action))
    }

    pub fn search_count(&self) -> usize {
        self.actions()
            .filter(|a| matches!(a, Action::Search { .. }))
            .count()
    }

    pub fn crop_count(&self) -> usize {
        self.actions()
            .filter(|a| matches!(a, Action::Crop { .. }))
            .count()
    }

    /// Every doc id chosen by any Select, in order, without duplicates.
    pub fn selected_doc_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.selections
            .iter()
            .flat_map(|s| s.doc_ids.iter())
            .filter(|d| seen.insert(d.as_str()))
            .map(String::as_str)
            .collect()
    }
}
