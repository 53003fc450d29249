//! Resumable build and filter passes over a job manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::build::{build_from_bbox, build_from_qa, BuildAttempt, BuildError, BuildInput};
use super::filter::{filter_reasoning_quality, filter_region_validity, FilterDecision, RetryPolicy};
use super::store::{CorpusStore, ParkedRecord, ProcessedRecord, ProcessedStatus};
use super::{ImageRef, Rejection, SourceDataset, VlirSample};
use crate::chat::{ChatClient, ChatMessage, ClientError, FnChatClient};
use crate::rewards::JudgeConfig;
use crate::types::{make_bbox, BBox};
use crate::vision::{crop_raw, encode_png, load_image};

/// One line of the build manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildJob {
    pub sample_id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    pub source: SourceDataset,
    pub question: String,
    pub answer: String,
    /// Known evidence box; selects the crop-conditioned prompt.
    #[serde(default)]
    pub bbox: Option<[i64; 4]>,
}

pub fn load_jobs(path: &Path) -> std::io::Result<Vec<BuildJob>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Generations per sample before giving up.
    pub attempts: u32,
    /// Samples processed concurrently between manifest writes.
    pub batch: usize,
    pub judge: JudgeConfig,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            attempts: 4,
            batch: 8,
            judge: JudgeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub jobs: usize,
    pub skipped: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub generations: usize,
    /// Rejected generations by reason (several per rejected sample).
    pub rejections: BTreeMap<Rejection, usize>,
    pub failures: Vec<Failure>,
}

enum JobResult {
    Done(BuildAttempt),
    Failed(String),
}

fn run_job(
    store: &CorpusStore,
    job: &BuildJob,
    base: &Path,
    generator: &dyn ChatClient,
    cfg: &BuildConfig,
) -> Result<BuildAttempt, String> {
    let path = if job.image.is_absolute() {
        job.image.clone()
    } else {
        base.join(&job.image)
    };
    let img = load_image(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let png = encode_png(&img).map_err(|e| e.to_string())?;
    let sha = store.store_image(&png).map_err(|e| e.to_string())?;
    let image = ImageRef {
        sha256: sha,
        width: img.width(),
        height: img.height(),
    };
    let input = BuildInput {
        sample_id: &job.sample_id,
        image: &image,
        png: &png,
        source: job.source,
        question: &job.question,
        answer: &job.answer,
    };
    let result = match job.bbox {
        Some([x1, y1, x2, y2]) => {
            let b = make_bbox(x1, y1, x2, y2, img.dimensions()).map_err(|e| e.to_string())?;
            build_from_bbox(generator, &input, &b.to_command(), cfg.attempts, &cfg.judge)
        }
        None => build_from_qa(generator, &input, cfg.attempts, &cfg.judge),
    };
    result.map_err(|e: BuildError| e.to_string())
}

/// Build every job not yet recorded in `store`. Jobs run concurrently in
/// batches; results are written in manifest order after each batch.
pub fn run_build(
    store: &CorpusStore,
    jobs: &[BuildJob],
    base: &Path,
    generator: &dyn ChatClient,
    cfg: &BuildConfig,
) -> std::io::Result<BuildSummary> {
    let done = store.processed_ids()?;
    let todo: Vec<&BuildJob> = jobs.iter().filter(|j| !done.contains(&j.sample_id)).collect();
    let mut summary = BuildSummary {
        jobs: jobs.len(),
        skipped: jobs.len() - todo.len(),
        ..Default::default()
    };
    for chunk in todo.chunks(cfg.batch.max(1)) {
        let results: Vec<JobResult> = chunk
            .par_iter()
            .map(|job| match run_job(store, job, base, generator, cfg) {
                Ok(a) => JobResult::Done(a),
                Err(e) => JobResult::Failed(e),
            })
            .collect();
        for (job, result) in chunk.iter().zip(results) {
            match result {
                JobResult::Done(a) => {
                    summary.generations += a.rejections.len() + a.sample.is_some() as usize;
                    for r in &a.rejections {
                        *summary.rejections.entry(*r).or_default() += 1;
                    }
                    let status = match &a.sample {
                        Some(s) => {
                            store.append_sample(s)?;
                            summary.accepted += 1;
                            ProcessedStatus::Accepted
                        }
                        None => {
                            summary.rejected += 1;
                            ProcessedStatus::Rejected
                        }
                    };
                    store.mark_processed(&ProcessedRecord {
                        sample_id: job.sample_id.clone(),
                        status,
                        rejections: a.rejections,
                    })?;
                }
                JobResult::Failed(error) => {
                    log::warn!("{}: {error}", job.sample_id);
                    store.park(&ParkedRecord {
                        sample_id: job.sample_id.clone(),
                        stage: "build".into(),
                        reason: error.clone(),
                    })?;
                    summary.failures.push(Failure {
                        sample_id: job.sample_id.clone(),
                        error,
                    });
                }
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub samples: usize,
    pub skipped: usize,
    pub accepted: usize,
    pub rejected_region: usize,
    pub rejected_reasoning: usize,
    pub parked: usize,
}

enum Verdict {
    Keep(VlirSample),
    RejectRegion,
    RejectReasoning,
    Park(String, String),
}

fn filter_one(
    images: &CorpusStore,
    sample: &VlirSample,
    region: &dyn ChatClient,
    reasoning: &dyn ChatClient,
    policy: &RetryPolicy,
) -> Verdict {
    let img = match load_image(&images.image_path(&sample.image.sha256)) {
        Ok(i) => i,
        Err(e) => return Verdict::Park("region".into(), format!("image unavailable: {e}")),
    };
    let mut out = sample.clone();
    for c in &sample.crops {
        let png = match crop_raw(&img, &c.bbox).map_err(|e| e.to_string()).and_then(|p| encode_png(&p).map_err(|e| e.to_string())) {
            Ok(p) => p,
            Err(e) => return Verdict::Park("region".into(), e),
        };
        match filter_region_validity(region, &png, policy) {
            FilterDecision::Accept => {}
            FilterDecision::Reject => return Verdict::RejectRegion,
            FilterDecision::Parked(why) => return Verdict::Park("region".into(), why),
        }
    }
    out.provenance.region_filter = Some(super::FilterOutcome::Accept);
    match filter_reasoning_quality(reasoning, &sample.question, &sample.answer, &sample.rationale, policy) {
        FilterDecision::Accept => {
            out.provenance.reasoning_filter = Some(super::FilterOutcome::Accept);
            Verdict::Keep(out)
        }
        FilterDecision::Reject => Verdict::RejectReasoning,
        FilterDecision::Parked(why) => Verdict::Park("reasoning".into(), why),
    }
}

/// Apply both filters to `input`, writing survivors to `out`. Images are
/// read from `images`. Resumable through `out`'s processed log.
pub fn run_filter(
    input: &[VlirSample],
    images: &CorpusStore,
    out: &CorpusStore,
    region: &dyn ChatClient,
    reasoning: &dyn ChatClient,
    policy: &RetryPolicy,
    batch: usize,
) -> std::io::Result<FilterSummary> {
    let done = out.processed_ids()?;
    let todo: Vec<&VlirSample> = input.iter().filter(|s| !done.contains(&s.sample_id)).collect();
    let mut summary = FilterSummary {
        samples: input.len(),
        skipped: input.len() - todo.len(),
        ..Default::default()
    };
    for chunk in todo.chunks(batch.max(1)) {
        let verdicts: Vec<Verdict> = chunk
            .par_iter()
            .map(|s| filter_one(images, s, region, reasoning, policy))
            .collect();
        for (s, v) in chunk.iter().zip(verdicts) {
            let status = match v {
                Verdict::Keep(kept) => {
                    out.append_sample(&kept)?;
                    summary.accepted += 1;
                    ProcessedStatus::Accepted
                }
                Verdict::RejectRegion => {
                    summary.rejected_region += 1;
                    ProcessedStatus::Rejected
                }
                Verdict::RejectReasoning => {
                    summary.rejected_reasoning += 1;
                    ProcessedStatus::Rejected
                }
                Verdict::Park(stage, reason) => {
                    summary.parked += 1;
                    out.park(&ParkedRecord {
                        sample_id: s.sample_id.clone(),
                        stage,
                        reason,
                    })?;
                    continue;
                }
            };
            out.mark_processed(&ProcessedRecord {
                sample_id: s.sample_id.clone(),
                status,
                rejections: Vec::new(),
            })?;
        }
    }
    Ok(summary)
}

/// Offline stand-in generator for dry runs: looks the question up in the
/// job list and writes a short rationale around the given crop (or the
/// job's box, or a one-pixel box at the origin), ending in the job's
/// answer. With `wrong`, the answer is deliberately altered.
pub fn template_generator(
    jobs: &[BuildJob],
    wrong: bool,
) -> impl ChatClient + use<> {
    let by_question: HashMap<String, BuildJob> = jobs.iter().map(|j| (j.question.clone(), j.clone())).collect();
    FnChatClient::new(if wrong { "template-wrong" } else { "template" }, move |msgs: &[ChatMessage]| {
        let prompt = msgs.last().map(ChatMessage::text_content).unwrap_or_default();
        let job = by_question
            .iter()
            .filter(|(q, _)| prompt.contains(q.as_str()))
            .max_by_key(|(q, _)| q.len())
            .map(|(_, j)| j)
            .ok_or_else(|| ClientError::Malformed("question not found in prompt".into()))?;
        let given = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("\"Crop\" operation:"))
            .last()
            .map(|c| c.trim().to_string());
        let crop = given.unwrap_or_else(|| {
            let b = job
                .bbox
                .map(|[a, b, c, d]| BBox {
                    x1: a as u32,
                    y1: b as u32,
                    x2: c as u32,
                    y2: d as u32,
                })
                .unwrap_or(BBox { x1: 0, y1: 0, x2: 1, y2: 1 });
            b.to_command()
        });
        let answer = if wrong { format!("not {}", job.answer) } else { job.answer.clone() };
        Ok(format!(
            "<think>Step 1: The answer depends on a small region, so I crop it. {crop}\nStep 2: The zoomed region shows the answer.</think>\n<answer>{answer}</answer>"
        ))
    })
}
