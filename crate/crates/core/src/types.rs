//! Shared domain types: boxes, crop actions, trajectory segments, reward
//! breakdowns, groups and the policy configuration.
//!
//! Everything here is plain data. Construction helpers validate the
//! invariants; nothing in this module talks to a backend or an image.

use serde::{Deserialize, Serialize};

/// Errors raised while constructing or validating domain values.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}] after clamping to {width}x{height}")]
    DegenerateBox {
        x1: i64,
        y1: i64,
        x2: i64,
        y2: i64,
        width: u32,
        height: u32,
    },
    #[error("image dimensions must be positive, got {0}x{1}")]
    InvalidDims(u32, u32),
    #[error("trajectories in a group must share a question id ({expected} vs {found})")]
    MixedGroup { expected: String, found: String },
    #[error("segments do not partition the token sequence: {0}")]
    SpanMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Axis-aligned pixel box in the working-image frame. Half-open on the
/// right and bottom edges, so `x2 - x1` is the width in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn full(width: u32, height: u32) -> Self {
        BBox {
            x1: 0,
            y1: 0,
            x2: width,
            y2: height,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        w as u64 * h as u64
    }

    /// Intersection over union; both boxes have positive area so the
    /// denominator is never zero.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Translate a box expressed inside `self` into the parent frame.
    pub fn compose(&self, inner: &BBox) -> BBox {
        BBox {
            x1: self.x1 + inner.x1,
            y1: self.y1 + inner.y1,
            x2: self.x1 + inner.x2,
            y2: self.y1 + inner.y2,
        }
    }

    /// Canonical command string for this box.
    pub fn to_command(&self) -> String {
        format!(
            "{{\"bbox_2d\": [{}, {}, {}, {}]}}",
            self.x1, self.y1, self.x2, self.y2
        )
    }
}

/// Clamp raw coordinates into `[0, width] x [0, height]` and build a box.
///
/// Out-of-range coordinates are clamped, not rejected; only a box whose
/// clamped area is zero is an error.
pub fn make_bbox(
    x1: i64,
    y1: i64,
    x2: i64,
    y2: i64,
    image_dims: (u32, u32),
) -> Result<BBox, CoreError> {
    let (width, height) = image_dims;
    if width == 0 || height == 0 {
        return Err(CoreError::InvalidDims(width, height));
    }
    let cx = |v: i64| v.clamp(0, width as i64) as u32;
    let cy = |v: i64| v.clamp(0, height as i64) as u32;
    let (a, b, c, d) = (cx(x1), cy(y1), cx(x2), cy(y2));
    if a >= c || b >= d {
        return Err(CoreError::DegenerateBox {
            x1,
            y1,
            x2,
            y2,
            width,
            height,
        });
    }
    Ok(BBox {
        x1: a,
        y1: b,
        x2: c,
        y2: d,
    })
}

/// One parsed crop command inside a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropAction {
    /// Coordinates exactly as written by the model.
    pub coords: [i64; 4],
    /// Clamped box, absent when the command is degenerate.
    pub bbox: Option<BBox>,
    pub raw_text: String,
    /// Byte span of the command in the transcript.
    pub char_span: (usize, usize),
    pub turn_index: usize,
    /// Whether the command sits inside the `<think>` block.
    pub in_think: bool,
    pub valid: bool,
    pub redundant: bool,
    /// Whether the environment intercepted and processed the command.
    #[serde(default)]
    pub executed: bool,
}

/// Where an injected region came from and how it was rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRef {
    pub bbox: BBox,
    pub scale: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentKind {
    ModelText { char_span: (usize, usize) },
    InjectedImage { region: RegionRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(flatten)]
    pub kind: SegmentKind,
    pub token_span: (usize, usize),
}

impl Segment {
    pub fn is_injected(&self) -> bool {
        matches!(self.kind, SegmentKind::InjectedImage { .. })
    }

    pub fn token_len(&self) -> usize {
        self.token_span.1 - self.token_span.0
    }
}

/// The four reward components and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_format: f64,
    pub r_valid: f64,
    pub r_length: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub const MAX_TOTAL: f64 = 2.75;

    pub fn new(r_acc: f64, r_format: f64, r_valid: f64, r_length: f64) -> Self {
        debug_assert!(r_acc == 0.0 || r_acc == 1.0);
        debug_assert!(r_format == 0.0 || r_format == 1.0);
        debug_assert!((0.0..=0.5).contains(&r_valid));
        debug_assert!((0.0..=0.25).contains(&r_length));
        RewardBreakdown {
            r_acc,
            r_format,
            r_valid,
            r_length,
            total: r_acc + r_format + r_valid + r_length,
        }
    }

    pub fn zero() -> Self {
        RewardBreakdown::new(0.0, 0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFlags {
    /// The backend emitted `</answer>` (or otherwise finished on its own).
    pub finished: bool,
    pub token_budget_hit: bool,
    pub crop_budget_hit: bool,
}

/// One complete interleaved episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub seed: u64,
    /// Concatenated model text; injected regions do not appear here.
    pub transcript: String,
    pub segments: Vec<Segment>,
    pub crop_actions: Vec<CropAction>,
    pub think_text: Option<String>,
    pub answer_text: Option<String>,
    pub format_ok: bool,
    pub reward: Option<RewardBreakdown>,
    /// Generation-time log-probabilities of the model-text tokens, in order.
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub flags: EpisodeFlags,
}

impl Trajectory {
    pub fn token_count(&self) -> usize {
        self.segments.last().map_or(0, |s| s.token_span.1)
    }

    pub fn injected_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_injected()).count()
    }

    pub fn executed_valid_crops(&self) -> usize {
        self.crop_actions
            .iter()
            .filter(|a| a.valid && a.executed)
            .count()
    }

    /// Text of a model-text segment.
    pub fn segment_text(&self, segment: &Segment) -> Option<&str> {
        match segment.kind {
            SegmentKind::ModelText { char_span } => self.transcript.get(char_span.0..char_span.1),
            SegmentKind::InjectedImage { .. } => None,
        }
    }

    /// Checks that segment token spans tile `[0, token_count)` and that
    /// text spans tile the transcript.
    pub fn check_partition(&self) -> Result<(), CoreError> {
        let mut next_token = 0;
        let mut next_char = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            let (s, e) = seg.token_span;
            if s != next_token || e < s {
                return Err(CoreError::SpanMismatch(format!(
                    "segment {i} token span {s}..{e}, expected start {next_token}"
                )));
            }
            next_token = e;
            if let SegmentKind::ModelText { char_span } = seg.kind {
                if char_span.0 != next_char || char_span.1 < char_span.0 {
                    return Err(CoreError::SpanMismatch(format!(
                        "segment {i} char span {}..{}, expected start {next_char}",
                        char_span.0, char_span.1
                    )));
                }
                next_char = char_span.1;
            }
        }
        if next_char != self.transcript.len() {
            return Err(CoreError::SpanMismatch(format!(
                "text segments cover {next_char} of {} transcript bytes",
                self.transcript.len()
            )));
        }
        Ok(())
    }
}

/// M trajectories sampled for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub question_id: String,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Option<Vec<f64>>,
}

impl GroupBatch {
    pub fn new(question_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self, CoreError> {
        let question_id = question_id.into();
        if let Some(t) = trajectories.iter().find(|t| t.question_id != question_id) {
            return Err(CoreError::MixedGroup {
                expected: question_id,
                found: t.question_id.clone(),
            });
        }
        Ok(GroupBatch {
            question_id,
            trajectories,
            advantages: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| t.reward.map_or(0.0, |r| r.total))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Crop, zoom and inject the region after every intercepted command.
    #[default]
    Interleaved,
    /// Record commands but never inject region images.
    TextOnly,
}

impl std::fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InjectionMode::Interleaved => "interleaved",
            InjectionMode::TextOnly => "text_only",
        })
    }
}

impl std::str::FromStr for InjectionMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "interleaved" => Ok(InjectionMode::Interleaved),
            "text_only" => Ok(InjectionMode::TextOnly),
            other => Err(CoreError::InvalidConfig(format!("unknown injection mode {other:?}"))),
        }
    }
}

pub const MIN_PIXELS: u64 = 3136;
pub const MAX_PIXELS: u64 = 1_605_632;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub group_size: usize,
    pub beta: f64,
    pub max_crop_turns: usize,
    pub min_pixels: u64,
    pub max_pixels: u64,
    pub iou_redundancy_threshold: f64,
    pub injection_mode: InjectionMode,
    pub rng_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            group_size: 5,
            beta: 0.0,
            max_crop_turns: 8,
            min_pixels: MIN_PIXELS,
            max_pixels: MAX_PIXELS,
            iou_redundancy_threshold: 0.9,
            injection_mode: InjectionMode::Interleaved,
            rng_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.group_size < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.min_pixels == 0 || self.min_pixels >= self.max_pixels {
            return Err(CoreError::InvalidConfig(format!(
                "need 0 < min_pixels < max_pixels, got {} / {}",
                self.min_pixels, self.max_pixels
            )));
        }
        if !(self.iou_redundancy_threshold > 0.0 && self.iou_redundancy_threshold <= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "iou threshold must lie in (0, 1], got {}",
                self.iou_redundancy_threshold
            )));
        }
        Ok(())
    }
}
