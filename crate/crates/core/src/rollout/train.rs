//! Optimizer steps: group-relative policy optimization and the cold-start
//! likelihood step, both restricted to action tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use super::group::{run_group, splitmix64};
use super::{run_episode, EpisodeConfig, RolloutError, RolloutSample};
use crate::backend::{Decoding, PolicyBackend};
use crate::rewards::total_reward;
use crate::rgrpo::{action_mask, rgrpo_loss, RgrpoError, ScoredGroup, StepMetrics, TokenMask};
use crate::types::{GroupBatch, Trajectory};

/// A scored group together with the sample it was rolled out on.
#[derive(Debug, Clone)]
pub struct SampledGroup<'a> {
    pub sample: &'a RolloutSample,
    pub batch: GroupBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub groups_per_step: usize,
    pub group_size: usize,
    pub beta: f64,
    pub seed: u64,
    /// Evaluate every this many steps (0 = only before and after).
    pub eval_every: usize,
    pub sft_steps: usize,
    pub label: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            groups_per_step: 16,
            group_size: 5,
            beta: 0.0,
            seed: 0,
            eval_every: 0,
            sft_steps: 0,
            label: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    /// (step, report) pairs; step 0 is the untrained policy.
    pub evals: Vec<(usize, EvalReport)>,
}

impl TrainOutcome {
    pub fn initial_accuracy(&self) -> Option<f64> {
        self.evals.first().map(|(_, r)| r.accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|(_, r)| r.accuracy)
    }
}

struct Scored {
    mask: TokenMask,
    logp: f64,
    logp_ref: f64,
}

fn score_one(
    backend: &dyn PolicyBackend,
    sample: &RolloutSample,
    config: &EpisodeConfig,
    t: &Trajectory,
) -> Result<Scored, RolloutError> {
    let scores = backend.score_sequence(sample.context(&config.system_prompt), t)?;
    let mask = action_mask(t)?;
    Ok(Scored {
        logp: mask.masked_sum(&scores.current)?,
        logp_ref: mask.masked_sum(&scores.reference)?,
        mask,
    })
}

/// Sum of per-trajectory gradients, accumulated in a fixed order so the
/// result does not depend on thread scheduling.
fn gradient(
    backend: &dyn PolicyBackend,
    jobs: &[(&RolloutSample, &Trajectory, Vec<f64>)],
    config: &EpisodeConfig,
) -> Result<Vec<f64>, RolloutError> {
    let n = backend.parameter_count();
    let parts: Vec<Result<Vec<f64>, RolloutError>> = jobs
        .par_iter()
        .map(|(sample, t, w)| {
            let mut g = vec![0.0; n];
            backend.accumulate_gradient(sample.context(&config.system_prompt), t, w, &mut g)?;
            Ok(g)
        })
        .collect();
    let mut total = vec![0.0; n];
    for p in parts {
        for (a, b) in total.iter_mut().zip(p?) {
            *a += b;
        }
    }
    Ok(total)
}

fn weights(mask: &TokenMask, w: f64) -> Vec<f64> {
    mask.0.iter().map(|&keep| if keep { w } else { 0.0 }).collect()
}

/// One update on the mean surrogate loss over `groups`.
pub fn train_step(
    backend: &mut dyn PolicyBackend,
    groups: &[SampledGroup<'_>],
    config: &EpisodeConfig,
    beta: f64,
    step: usize,
) -> Result<StepMetrics, RolloutError> {
    if !backend.capabilities().can_train {
        return Err(crate::backend::BackendError::Unsupported("train_step").into());
    }
    let reader: &dyn PolicyBackend = &*backend;
    let flat: Vec<(usize, &RolloutSample, &Trajectory)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, sg)| sg.batch.trajectories.iter().map(move |t| (g, sg.sample, t)))
        .collect();
    let scored: Vec<Scored> = flat
        .par_iter()
        .map(|(_, s, t)| score_one(reader, s, config, t))
        .collect::<Result<_, _>>()?;

    let n_groups = groups.len().max(1) as f64;
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_n = 0usize;
    let mut token_weights: Vec<Vec<f64>> = Vec::with_capacity(flat.len());
    let mut offset = 0;
    for sg in groups {
        let m = sg.batch.len();
        let part = &scored[offset..offset + m];
        offset += m;
        let advantages = match &sg.batch.advantages {
            Some(a) => a.clone(),
            None => crate::rgrpo::normalize_advantages(&sg.batch.rewards())?,
        };
        let group = ScoredGroup {
            advantages,
            logp_theta: part.iter().map(|s| s.logp).collect(),
            logp_ref: Some(part.iter().map(|s| s.logp_ref).collect()),
        };
        let l = rgrpo_loss(&group, beta)?;
        loss += l.value / n_groups;
        kl_sum += l.kl.iter().sum::<f64>();
        kl_n += l.kl.len();
        for (s, g) in part.iter().zip(&l.grad_logp) {
            token_weights.push(weights(&s.mask, g / n_groups));
        }
    }
    if !loss.is_finite() {
        return Err(RolloutError::NonFiniteLoss(loss));
    }

    let jobs: Vec<(&RolloutSample, &Trajectory, Vec<f64>)> = flat
        .iter()
        .zip(token_weights)
        .map(|(&(_, s, t), w)| (s, t, w))
        .collect();
    let grad = gradient(reader, &jobs, config)?;
    let version = backend.apply_update(&grad)?;

    let mut metrics = batch_metrics(groups);
    metrics.step = step;
    metrics.loss = loss;
    metrics.kl_mean = if kl_n == 0 { 0.0 } else { kl_sum / kl_n as f64 };
    metrics.param_version = version;
    Ok(metrics)
}

fn batch_metrics(groups: &[SampledGroup<'_>]) -> StepMetrics {
    let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.batch.trajectories).collect();
    let n = trajs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Trajectory) -> f64| trajs.iter().map(|t| f(t)).sum::<f64>() / n;
    let reward = |t: &Trajectory| t.reward.unwrap_or_else(crate::types::RewardBreakdown::zero);
    let advs: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.batch.advantages.clone().unwrap_or_default())
        .collect();
    let adv_std = if advs.is_empty() {
        0.0
    } else {
        let m = advs.iter().sum::<f64>() / advs.len() as f64;
        (advs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / advs.len() as f64).sqrt()
    };
    let actions: Vec<bool> = trajs
        .iter()
        .flat_map(|t| t.crop_actions.iter().map(|a| a.valid && !a.redundant))
        .collect();
    StepMetrics {
        mean_reward: mean(&|t| reward(t).total),
        mean_r_acc: mean(&|t| reward(t).r_acc),
        mean_r_format: mean(&|t| reward(t).r_format),
        mean_r_valid: mean(&|t| reward(t).r_valid),
        mean_r_length: mean(&|t| reward(t).r_length),
        advantage_std: adv_std,
        valid_crop_rate: if actions.is_empty() {
            0.0
        } else {
            actions.iter().filter(|&&v| v).count() as f64 / actions.len() as f64
        },
        groups: groups.len(),
        ..StepMetrics::default()
    }
}

/// One likelihood step on demonstrations: mean negative log-likelihood
/// over all action tokens. Returns the loss before the update.
pub fn sft_step(
    backend: &mut dyn PolicyBackend,
    demos: &[(&RolloutSample, &Trajectory)],
    config: &EpisodeConfig,
) -> Result<f64, RolloutError> {
    let reader: &dyn PolicyBackend = &*backend;
    let scored: Vec<Scored> = demos
        .par_iter()
        .map(|(s, t)| score_one(reader, s, config, t))
        .collect::<Result<_, _>>()?;
    let n: usize = scored.iter().map(|s| s.mask.action_count()).sum();
    if n == 0 {
        return Err(RgrpoError::EmptyMask.into());
    }
    let loss = -scored.iter().map(|s| s.logp).sum::<f64>() / n as f64;
    let jobs: Vec<(&RolloutSample, &Trajectory, Vec<f64>)> = demos
        .iter()
        .zip(&scored)
        .map(|(&(s, t), sc)| (s, t, weights(&sc.mask, -1.0 / n as f64)))
        .collect();
    let grad = gradient(reader, &jobs, config)?;
    backend.apply_update(&grad)?;
    Ok(loss)
}

/// Roll out `teacher` on each sample and keep the correct, well-formed
/// episodes that executed at least one crop.
pub fn collect_demonstrations<'a>(
    teacher: &dyn PolicyBackend,
    samples: &'a [RolloutSample],
    config: &EpisodeConfig,
) -> Result<Vec<(&'a RolloutSample, Trajectory)>, RolloutError> {
    let cfg = EpisodeConfig {
        decoding: Decoding::Greedy,
        ..config.clone()
    };
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut t = run_episode(teacher, s, &cfg, i as u64)?;
        let r = total_reward(&mut t, &s.answer, &cfg.judge);
        if r.r_acc == 1.0 && t.format_ok && !t.crop_actions.is_empty() {
            out.push((s, t));
        }
    }
    Ok(out)
}

/// Cold start (optional) followed by group-relative optimization. Calls
/// `on_step` after every optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_rgrpo(
    backend: &mut dyn PolicyBackend,
    train: &[RolloutSample],
    eval: &[RolloutSample],
    config: &EpisodeConfig,
    cfg: &TrainConfig,
    demos: &[(&RolloutSample, &Trajectory)],
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome, RolloutError> {
    if train.is_empty() {
        return Err(RolloutError::Config("empty training set".into()));
    }
    let eval_cfg = EpisodeConfig {
        decoding: Decoding::Greedy,
        ..config.clone()
    };
    let mut outcome = TrainOutcome::default();

    for i in 0..cfg.sft_steps {
        if demos.is_empty() {
            break;
        }
        let loss = sft_step(backend, demos, config)?;
        log::debug!("sft step {i}: loss {loss:.6}");
    }
    if cfg.beta > 0.0 || cfg.sft_steps > 0 {
        match backend.snapshot_reference() {
            Ok(()) | Err(crate::backend::BackendError::Unsupported(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }

    if !eval.is_empty() {
        outcome.evals.push((0, evaluate(&*backend, eval, &eval_cfg)?));
    }
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(step as u64)));
        let picks: Vec<(usize, u64)> = (0..cfg.groups_per_step)
            .map(|_| (rng.random_range(0..train.len()), rng.random()))
            .collect();
        let reader: &dyn PolicyBackend = &*backend;
        let outcomes: Vec<_> = picks
            .par_iter()
            .map(|&(idx, seed)| run_group(reader, &train[idx], cfg.group_size, config, seed).map(|o| (idx, o)))
            .collect::<Result<_, _>>()?;
        let mut discarded = 0;
        let groups: Vec<SampledGroup<'_>> = outcomes
            .into_iter()
            .filter_map(|(idx, o)| match o.batch {
                Some(batch) => Some(SampledGroup {
                    sample: &train[idx],
                    batch,
                }),
                None => {
                    discarded += 1;
                    None
                }
            })
            .collect();
        let mut m = if groups.is_empty() {
            StepMetrics {
                step,
                ..StepMetrics::default()
            }
        } else {
            train_step(backend, &groups, config, cfg.beta, step)?
        };
        m.discarded_groups = discarded;
        m.label = cfg.label.clone();
        on_step(&m);
        outcome.metrics.push(m);
        let done = step + 1;
        if !eval.is_empty() && (done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0)) {
            outcome.evals.push((done, evaluate(&*backend, eval, &eval_cfg)?));
        }
    }
    Ok(outcome)
}
