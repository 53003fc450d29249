//! The interactive inference loop: generate, intercept crop commands,
//! crop and zoom, inject, resume. Also group sampling, training steps,
//! evaluation and the grounding-perturbation harness.

mod eval;
mod group;
mod perturb;
mod train;

pub use eval::{evaluate, perturbation_sweep, EvalReport, SweepPoint};
pub use group::{episode_seed, run_group, GroupOutcome};
pub use perturb::{perturb_grounding, PerturbKind, PerturbSpec, Perturber};
pub use train::{collect_demonstrations, sft_step, train_rgrpo, train_step, SampledGroup, TrainConfig, TrainOutcome};

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Decoding, EpisodeContext, PolicyBackend};
use crate::prompts::SYSTEM_INSTRUCTION;
use crate::rewards::JudgeConfig;
use crate::rgrpo::RgrpoError;
use crate::toolcall::{
    annotate_actions, build_action, parse_transcript, think_regions, trailing_command, ANSWER_CLOSE,
};
use crate::types::{BBox, EpisodeFlags, InjectionMode, Segment, SegmentKind, Trajectory};
use crate::vision::{RegionEvidence, WorkingImage};

/// One question over one normalized image.
#[derive(Debug, Clone)]
pub struct RolloutSample {
    pub id: String,
    pub image: WorkingImage,
    pub question: String,
    pub answer: String,
}

impl RolloutSample {
    pub fn context<'a>(&'a self, system_prompt: &'a str) -> EpisodeContext<'a> {
        EpisodeContext {
            system_prompt,
            image: &self.image,
            question: &self.question,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rgrpo(#[from] RgrpoError),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub system_prompt: String,
    pub injection_mode: InjectionMode,
    pub max_crop_turns: usize,
    /// Budget over all context positions, injected ones included.
    pub max_total_tokens: usize,
    pub iou_threshold: f64,
    pub decoding: Decoding,
    /// Grounding perturbation applied to executed boxes.
    pub perturb: Option<PerturbSpec>,
    pub judge: JudgeConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            system_prompt: SYSTEM_INSTRUCTION.to_string(),
            injection_mode: InjectionMode::Interleaved,
            max_crop_turns: 8,
            max_total_tokens: 4096,
            iou_threshold: 0.9,
            decoding: Decoding::default(),
            perturb: None,
            judge: JudgeConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn check(&self, backend: &dyn PolicyBackend) -> Result<(), RolloutError> {
        if self.injection_mode == InjectionMode::Interleaved && !backend.capabilities().can_inject_images {
            return Err(RolloutError::Config(format!(
                "interleaved mode needs a vision-capable backend; {} cannot inject images",
                backend.name()
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(RolloutError::Config(format!("iou threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if let Some(p) = &self.perturb {
            p.validate().map_err(RolloutError::Config)?;
        }
        Ok(())
    }
}

/// Run one episode to completion and return the segmented trajectory
/// (unscored).
pub fn run_episode(
    backend: &dyn PolicyBackend,
    sample: &RolloutSample,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Trajectory, RolloutError> {
    config.check(backend)?;
    let ctx = sample.context(&config.system_prompt);
    let dims = sample.image.dims();
    let mut session = backend.start_episode(ctx, seed, config.decoding)?;
    let mut perturber = config.perturb.as_ref().map(|p| Perturber::for_episode(p, seed));

    let mut transcript = String::new();
    let mut segments: Vec<Segment> = Vec::new();
    let mut logprobs: Option<Vec<f64>> = Some(Vec::new());
    let mut tokens = 0usize;
    let mut flags = EpisodeFlags::default();
    let mut prior_valid: Vec<BBox> = Vec::new();
    let mut seen_commands = 0usize;
    let mut executed_spans: HashSet<(usize, usize)> = HashSet::new();

    loop {
        if transcript.contains(ANSWER_CLOSE) {
            flags.finished = true;
            break;
        }
        if tokens >= config.max_total_tokens {
            flags.token_budget_hit = true;
            break;
        }
        let intercept = executed_spans.len() < config.max_crop_turns;
        let stop = |t: &str| t.contains(ANSWER_CLOSE) || (intercept && trailing_command(t).is_some());
        let gen = session.generate_until(&stop, config.max_total_tokens - tokens)?;
        if gen.token_count == 0 {
            flags.finished = gen.finished;
            break;
        }
        let start = transcript.len();
        transcript.push_str(&gen.text);
        segments.push(Segment {
            kind: SegmentKind::ModelText {
                char_span: (start, transcript.len()),
            },
            token_span: (tokens, tokens + gen.token_count),
        });
        tokens += gen.token_count;
        match (&mut logprobs, gen.logprobs) {
            (Some(all), Some(lp)) if lp.len() == gen.token_count => all.extend(lp),
            _ => logprobs = None,
        }

        if gen.text.contains(ANSWER_CLOSE) {
            continue;
        }
        let command = if intercept { trailing_command(&gen.text) } else { None };
        if let Some(cmd) = command {
            let cmd = cmd.shifted(start);
            let in_think = think_regions(&transcript)
                .iter()
                .any(|&(s, e)| cmd.span.0 >= s && cmd.span.1 <= e);
            let action = build_action(&cmd, in_think, seen_commands, dims, &prior_valid, config.iou_threshold);
            seen_commands += 1;
            if let (true, Some(bbox)) = (action.valid, action.bbox) {
                prior_valid.push(bbox);
                if tokens >= config.max_total_tokens {
                    // No room left to execute; the loop ends on the budget.
                    continue;
                }
                executed_spans.insert(cmd.span);
                let target = match perturber.as_mut() {
                    Some(p) => p.perturb_box(&bbox, dims),
                    None => bbox,
                };
                if config.injection_mode == InjectionMode::Interleaved {
                    let evidence = RegionEvidence::extract(&sample.image, &target)
                        .map_err(|e| BackendError::InvalidInput(e.to_string()))?;
                    let n = session.inject_image(&evidence)?;
                    segments.push(Segment {
                        kind: SegmentKind::InjectedImage {
                            region: evidence.region_ref(),
                        },
                        token_span: (tokens, tokens + n),
                    });
                    tokens += n;
                }
            } else {
                log::debug!("episode {}: command {:?} not executed", sample.id, cmd.raw);
            }
            continue;
        }
        if gen.finished {
            flags.finished = true;
            break;
        }
    }

    let parsed = parse_transcript(&transcript);
    let mut crop_actions = annotate_actions(&parsed, dims, config.iou_threshold);
    for a in &mut crop_actions {
        a.executed = executed_spans.contains(&a.char_span);
    }
    if executed_spans.len() >= config.max_crop_turns && crop_actions.iter().any(|a| a.valid && !a.executed) {
        flags.crop_budget_hit = true;
    }

    Ok(Trajectory {
        question_id: sample.id.clone(),
        seed,
        transcript,
        segments,
        crop_actions,
        think_text: parsed.think_text,
        answer_text: parsed.answer_text,
        format_ok: parsed.format_ok,
        reward: None,
        token_logprobs: logprobs,
        flags,
    })
}

/// One line of the trajectory log.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord<'a> {
    pub question_id: &'a str,
    pub seed: u64,
    pub transcript: &'a str,
    pub segments: &'a [Segment],
    pub crop_actions: &'a [crate::types::CropAction],
    pub reward: Option<crate::types::RewardBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}

/// Append trajectories as line-delimited JSON.
pub fn write_trajectories<W: Write>(
    out: &mut W,
    trajectories: &[Trajectory],
    advantages: Option<&[f64]>,
) -> std::io::Result<()> {
    for (i, t) in trajectories.iter().enumerate() {
        let rec = TrajectoryRecord {
            question_id: &t.question_id,
            seed: t.seed,
            transcript: &t.transcript,
            segments: &t.segments,
            crop_actions: &t.crop_actions,
            reward: t.reward,
            advantage: advantages.and_then(|a| a.get(i).copied()),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
