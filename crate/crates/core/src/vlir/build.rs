//! Rationale construction with rejection sampling.

use serde::{Deserialize, Serialize};

use super::{answer_matches, crop_records, ConstructionPath, CropRecord, ImageRef, Provenance, SourceDataset, VlirSample, SCHEMA_VERSION};
use crate::chat::{ChatClient, ChatMessage, ClientError};
use crate::prompts;
use crate::rewards::JudgeConfig;
use crate::toolcall::{parse_transcript, scan_crop_commands};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rejection {
    BadFormat,
    NoCrop,
    WrongAnswer,
    CropAltered,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BuildError {
    #[error("generator failure: {0}")]
    Generator(#[from] ClientError),
    #[error("invalid crop string {0:?}")]
    InvalidCrop(String),
    #[error("image encoding: {0}")]
    Image(String),
}

/// Everything the builder needs about one source question.
#[derive(Debug, Clone)]
pub struct BuildInput<'a> {
    pub sample_id: &'a str,
    pub image: &'a ImageRef,
    pub png: &'a [u8],
    pub source: SourceDataset,
    pub question: &'a str,
    pub answer: &'a str,
}

/// Outcome of one construction call over up to `attempts` generations.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildAttempt {
    pub sample: Option<VlirSample>,
    /// One entry per rejected generation, in order.
    pub rejections: Vec<Rejection>,
}

/// Acceptance predicate shared by both construction paths and offline
/// validation. Checks, in order: format, presence of a crop, the
/// required crop (if any), the answer.
pub fn check_candidate(
    text: &str,
    truth: &str,
    dims: (u32, u32),
    required_crop: Option<&str>,
    judge: &JudgeConfig,
) -> Result<Vec<CropRecord>, Rejection> {
    if !parse_transcript(text).format_ok {
        return Err(Rejection::BadFormat);
    }
    let crops = crop_records(text, dims);
    if crops.is_empty() {
        return Err(Rejection::NoCrop);
    }
    if required_crop.is_some_and(|req| !text.contains(req)) {
        return Err(Rejection::CropAltered);
    }
    if !answer_matches(text, truth, judge) {
        return Err(Rejection::WrongAnswer);
    }
    Ok(crops)
}

fn construct(
    client: &dyn ChatClient,
    input: &BuildInput<'_>,
    prompt: String,
    path: ConstructionPath,
    required_crop: Option<&str>,
    attempts: u32,
    judge: &JudgeConfig,
) -> Result<BuildAttempt, BuildError> {
    let messages = [ChatMessage::with_image("user", input.png.to_vec(), prompt)];
    let dims = (input.image.width, input.image.height);
    let mut rejections = Vec::new();
    for n in 1..=attempts.max(1) {
        let text = client.complete(&messages)?;
        let text = text.trim();
        match check_candidate(text, input.answer, dims, required_crop, judge) {
            Ok(crops) => {
                return Ok(BuildAttempt {
                    sample: Some(VlirSample {
                        schema_version: SCHEMA_VERSION,
                        sample_id: input.sample_id.to_string(),
                        image: input.image.clone(),
                        source: input.source,
                        question: input.question.to_string(),
                        answer: input.answer.to_string(),
                        rationale: text.to_string(),
                        crops,
                        provenance: Provenance {
                            generator: client.id(),
                            path,
                            attempts: n,
                            region_filter: None,
                            reasoning_filter: None,
                        },
                    }),
                    rejections,
                })
            }
            Err(r) => {
                log::debug!("{}: attempt {n} rejected {r:?}", input.sample_id);
                rejections.push(r);
            }
        }
    }
    Ok(BuildAttempt {
        sample: None,
        rejections,
    })
}

/// Generate from the question alone; keep the first candidate that is well
/// formed, crops at least once and reaches the ground truth.
pub fn build_from_qa(
    client: &dyn ChatClient,
    input: &BuildInput<'_>,
    attempts: u32,
    judge: &JudgeConfig,
) -> Result<BuildAttempt, BuildError> {
    let prompt = prompts::construct_from_qa(input.question);
    construct(client, input, prompt, ConstructionPath::QaPrompt, None, attempts, judge)
}

/// Generate around a known crop; the candidate must additionally embed the
/// crop string unmodified.
pub fn build_from_bbox(
    client: &dyn ChatClient,
    input: &BuildInput<'_>,
    crop: &str,
    attempts: u32,
    judge: &JudgeConfig,
) -> Result<BuildAttempt, BuildError> {
    let cmds = scan_crop_commands(crop);
    if cmds.len() != 1 || cmds[0].raw != crop.trim() {
        return Err(BuildError::InvalidCrop(crop.to_string()));
    }
    let crop = crop.trim();
    let prompt = prompts::construct_from_bbox(input.question, crop);
    construct(client, input, prompt, ConstructionPath::BboxPrompt, Some(crop), attempts, judge)
}
