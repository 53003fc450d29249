//! Sampling M rollouts of one question and standardising their rewards.

use rayon::prelude::*;

use super::{run_episode, EpisodeConfig, RolloutError, RolloutSample};
use crate::backend::PolicyBackend;
use crate::rewards::total_reward;
use crate::rgrpo::normalize_advantages;
use crate::types::{GroupBatch, Trajectory};

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of slot `slot` in a group sampled from `group_seed`.
pub fn episode_seed(group_seed: u64, slot: usize) -> u64 {
    splitmix64(group_seed ^ splitmix64(slot as u64 + 1))
}

#[derive(Debug)]
pub struct GroupOutcome {
    /// Scored group with advantages attached; `None` when fewer than two
    /// episodes completed.
    pub batch: Option<GroupBatch>,
    pub failures: Vec<String>,
}

/// Roll out `m` episodes of `sample` with distinct seeds, score them and
/// attach group-normalized advantages.
pub fn run_group(
    backend: &dyn PolicyBackend,
    sample: &RolloutSample,
    m: usize,
    config: &EpisodeConfig,
    group_seed: u64,
) -> Result<GroupOutcome, RolloutError> {
    if m < 2 {
        return Err(RolloutError::Config(format!("group size must be at least 2, got {m}")));
    }
    config.check(backend)?;
    let one = |slot: usize| run_episode(backend, sample, config, episode_seed(group_seed, slot));
    let results: Vec<Result<Trajectory, RolloutError>> = if backend.capabilities().concurrent_safe {
        (0..m).into_par_iter().map(one).collect()
    } else {
        (0..m).map(one).collect()
    };

    let mut trajectories = Vec::with_capacity(m);
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(mut t) => {
                total_reward(&mut t, &sample.answer, &config.judge);
                trajectories.push(t);
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if trajectories.len() < 2 {
        log::warn!(
            "discarding group {}: {} of {m} episodes completed",
            sample.id,
            trajectories.len()
        );
        return Ok(GroupOutcome { batch: None, failures });
    }
    let mut batch = GroupBatch::new(sample.id.clone(), trajectories).map_err(crate::rgrpo::RgrpoError::from)?;
    batch.advantages = Some(normalize_advantages(&batch.rewards())?);
    Ok(GroupOutcome {
        batch: Some(batch),
        failures,
    })
}
