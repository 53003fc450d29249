//! Exact-match evaluation and the grounding-accuracy sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::perturb::{PerturbKind, PerturbSpec};
use super::{run_episode, EpisodeConfig, RolloutError, RolloutSample};
use crate::backend::PolicyBackend;
use crate::rewards::total_reward;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub correct: usize,
    /// Correct answers over all samples; failed episodes count as wrong.
    pub accuracy: f64,
    /// Crop commands per completed episode.
    pub mean_crops: f64,
    pub format_rate: f64,
    /// Code points inside the think block per completed episode.
    pub mean_think_chars: f64,
    pub failures: usize,
}

/// One episode per sample, seeded by the sample's index. Decoding comes
/// from `config` (greedy for evaluation).
pub fn evaluate(
    backend: &dyn PolicyBackend,
    dataset: &[RolloutSample],
    config: &EpisodeConfig,
) -> Result<EvalReport, RolloutError> {
    if dataset.is_empty() {
        return Err(RolloutError::Config(
            "evaluation dataset is empty; point the eval stage at a fixture or corpus with samples".into(),
        ));
    }
    config.check(backend)?;
    let run = |(i, s): (usize, &RolloutSample)| {
        run_episode(backend, s, config, i as u64).map(|mut t| {
            let r = total_reward(&mut t, &s.answer, &config.judge);
            (r.r_acc, t.crop_actions.len(), t.format_ok, t.think_text.map_or(0, |x| x.chars().count()))
        })
    };
    let results: Vec<_> = if backend.capabilities().concurrent_safe {
        dataset.par_iter().enumerate().map(run).collect()
    } else {
        dataset.iter().enumerate().map(run).collect()
    };

    let mut rep = EvalReport {
        samples: dataset.len(),
        ..Default::default()
    };
    let (mut crops, mut formats, mut chars) = (0usize, 0usize, 0usize);
    for r in results {
        match r {
            Ok((acc, c, f, n)) => {
                rep.correct += (acc == 1.0) as usize;
                crops += c;
                formats += f as usize;
                chars += n;
            }
            Err(e) => {
                log::warn!("evaluation episode failed: {e}");
                rep.failures += 1;
            }
        }
    }
    let done = (rep.samples - rep.failures).max(1) as f64;
    rep.accuracy = rep.correct as f64 / rep.samples as f64;
    rep.mean_crops = crops as f64 / done;
    rep.format_rate = formats as f64 / done;
    rep.mean_think_chars = chars as f64 / done;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub grounding_accuracy: f64,
    pub kind: PerturbKind,
    pub report: EvalReport,
}

/// Evaluate once per grounding accuracy with perturbed executed boxes.
pub fn perturbation_sweep(
    backend: &dyn PolicyBackend,
    dataset: &[RolloutSample],
    config: &EpisodeConfig,
    grid: &[f64],
    kind: PerturbKind,
    seed: u64,
) -> Result<Vec<SweepPoint>, RolloutError> {
    grid.iter()
        .map(|&p| {
            let cfg = EpisodeConfig {
                perturb: Some(PerturbSpec::new(p, kind, seed)),
                ..config.clone()
            };
            Ok(SweepPoint {
                grounding_accuracy: p,
                kind,
                report: evaluate(backend, dataset, &cfg)?,
            })
        })
        .collect()
}
