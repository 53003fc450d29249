//! Interleaved-rationale corpus: construction by rejection sampling,
//! the two quality filters, schema, storage and distribution statistics.

pub mod build;
pub mod filter;
pub mod fixtures;
pub mod pipeline;
pub mod stats;
pub mod store;

pub use build::{build_from_bbox, build_from_qa, check_candidate, BuildAttempt, BuildError, Rejection};
pub use filter::{filter_reasoning_quality, filter_region_validity, parse_filter_reply, FilterDecision, RetryPolicy};
pub use stats::{corpus_stats, CorpusStats};
pub use store::CorpusStore;

use serde::{Deserialize, Serialize};

use crate::rewards::{exact_match, JudgeConfig};
use crate::toolcall::{annotate_actions, parse_transcript};
use crate::types::BBox;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceDataset {
    GQA,
    TextVQA,
    DocVQA,
    InfographicsVQA,
    VSR,
}

impl SourceDataset {
    pub const ALL: [SourceDataset; 5] = [
        SourceDataset::GQA,
        SourceDataset::TextVQA,
        SourceDataset::DocVQA,
        SourceDataset::InfographicsVQA,
        SourceDataset::VSR,
    ];
}

impl std::fmt::Display for SourceDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for SourceDataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SourceDataset::ALL
            .into_iter()
            .find(|d| d.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown source dataset {s:?}"))
    }
}

/// Crop size relative to the whole image, lower-inclusive bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SizeCategory {
    VerySmall,
    Small,
    Medium,
    Large,
}

impl SizeCategory {
    pub const ALL: [SizeCategory; 4] = [
        SizeCategory::VerySmall,
        SizeCategory::Small,
        SizeCategory::Medium,
        SizeCategory::Large,
    ];

    pub fn from_ratio(r: f64) -> SizeCategory {
        if r < 0.05 {
            SizeCategory::VerySmall
        } else if r < 0.25 {
            SizeCategory::Small
        } else if r < 0.5 {
            SizeCategory::Medium
        } else {
            SizeCategory::Large
        }
    }
}

pub fn classify_crop_size(bbox: &BBox, image_dims: (u32, u32)) -> SizeCategory {
    SizeCategory::from_ratio(area_ratio(bbox, image_dims))
}

pub fn area_ratio(bbox: &BBox, (w, h): (u32, u32)) -> f64 {
    bbox.area() as f64 / (w as u64 * h as u64) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    /// Hex SHA-256 of the image file; also its file name in the store.
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub bbox: BBox,
    pub area_ratio: f64,
    pub category: SizeCategory,
}

impl CropRecord {
    pub fn new(bbox: BBox, dims: (u32, u32)) -> Self {
        let r = area_ratio(&bbox, dims);
        CropRecord {
            bbox,
            area_ratio: r,
            category: SizeCategory::from_ratio(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstructionPath {
    QaPrompt,
    BboxPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterOutcome {
    Accept,
    Reject,
    Parked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub path: ConstructionPath,
    /// Generation attempts spent, the accepted one included.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_filter: Option<FilterOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_filter: Option<FilterOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlirSample {
    pub schema_version: u32,
    pub sample_id: String,
    pub image: ImageRef,
    pub source: SourceDataset,
    pub question: String,
    pub answer: String,
    pub rationale: String,
    pub crops: Vec<CropRecord>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("sample {sample_id}: {reason}")]
pub struct SchemaViolation {
    pub sample_id: String,
    pub reason: String,
}

impl VlirSample {
    /// Re-check every acceptance predicate offline.
    pub fn validate(&self, judge: &JudgeConfig) -> Result<(), SchemaViolation> {
        let fail = |reason: String| {
            Err(SchemaViolation {
                sample_id: self.sample_id.clone(),
                reason,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("schema version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let dims = (self.image.width, self.image.height);
        if dims.0 == 0 || dims.1 == 0 {
            return fail("image with zero dimension".into());
        }
        let records = match check_candidate(&self.rationale, &self.answer, dims, None, judge) {
            Ok(r) => r,
            Err(rej) => return fail(format!("rationale rejected: {rej:?}")),
        };
        if records != self.crops {
            return fail("crop records do not match the rationale's crop commands".into());
        }
        for c in &self.crops {
            if c.category != SizeCategory::from_ratio(c.area_ratio) {
                return fail(format!("crop {:?} has ratio {} but category {:?}", c.bbox, c.area_ratio, c.category));
            }
        }
        Ok(())
    }
}

/// Answer text of a rationale if it matches the ground truth.
pub(crate) fn answer_matches(rationale: &str, truth: &str, judge: &JudgeConfig) -> bool {
    parse_transcript(rationale)
        .answer_text
        .is_some_and(|a| exact_match(&a, truth, judge) == 1.0)
}

/// Crop records for the valid commands in a rationale.
pub(crate) fn crop_records(rationale: &str, dims: (u32, u32)) -> Vec<CropRecord> {
    let parsed = parse_transcript(rationale);
    annotate_actions(&parsed, dims, 1.0)
        .into_iter()
        .filter(|a| a.valid)
        .filter_map(|a| a.bbox)
        .map(|b| CropRecord::new(b, dims))
        .collect()
}
