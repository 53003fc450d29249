//! Group-relative policy optimization over interleaved trajectories.
//!
//! Advantages are rewards standardised within a group of M rollouts of
//! the same question. The surrogate loss weights each trajectory's
//! summed action-token log-probability by its advantage through a ratio
//! against a detached copy of itself, so the ratio evaluates to 1 while
//! carrying the policy-gradient path. Tokens injected by the environment
//! (region images) are masked out of every sum.
//!
//! ```text
//! A_i   = (r_i - mean(r)) / std(r)                       population std
//! L     = -(1/M) sum_i [ exp(lp_i - sg(lp_i)) A_i - beta KL_i ]
//! KL_i  = x - ln x - 1,   x = exp(lp_ref_i - lp_i)
//! ```

use serde::{Deserialize, Serialize};

use crate::types::{CoreError, SegmentKind, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RgrpoError {
    #[error("group of {0} trajectories is too small, need at least 2")]
    GroupTooSmall(usize),
    #[error("beta is {0} but no reference log-probabilities were supplied")]
    MissingReference(f64),
    #[error("no action tokens to train on")]
    EmptyMask,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Group-standardised advantages. A zero-variance group yields zeros.
pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>, RgrpoError> {
    let m = rewards.len();
    if m < 2 {
        return Err(RgrpoError::GroupTooSmall(m));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; m]);
    }
    let mean = rewards.iter().sum::<f64>() / m as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / m as f64;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token flag: true for tokens the policy generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask(pub Vec<bool>);

impl TokenMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Sum of `values` over action positions. Masked positions are skipped,
    /// not multiplied by zero, so non-finite values there cannot leak.
    pub fn masked_sum(&self, values: &[f64]) -> Result<f64, RgrpoError> {
        if values.len() != self.len() {
            return Err(RgrpoError::LengthMismatch(format!(
                "{} values for a mask of {}",
                values.len(),
                self.len()
            )));
        }
        Ok(values
            .iter()
            .zip(&self.0)
            .filter(|(_, &keep)| keep)
            .map(|(v, _)| v)
            .sum())
    }
}

/// Mask over a trajectory's token sequence: model text is trainable,
/// injected region tokens are not.
pub fn action_mask(trajectory: &Trajectory) -> Result<TokenMask, RgrpoError> {
    trajectory.check_partition()?;
    let mut mask = Vec::with_capacity(trajectory.token_count());
    for seg in &trajectory.segments {
        let keep = matches!(seg.kind, SegmentKind::ModelText { .. });
        mask.extend(std::iter::repeat_n(keep, seg.token_len()));
    }
    Ok(TokenMask(mask))
}

/// `x - ln x - 1` with `x = exp(logp_ref - logp_theta)`; never negative.
pub fn kl_estimate(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    if d.abs() < 1e-3 {
        // series of exp(d) - 1 - d, exact to rounding for small d
        let d2 = d * d;
        return d2 * (0.5 + d * (1.0 / 6.0 + d * (1.0 / 24.0 + d * (1.0 / 120.0 + d / 720.0))));
    }
    (d.exp_m1() - d).max(0.0)
}

/// d KL / d logp_theta.
fn kl_grad(logp_theta: f64, logp_ref: f64) -> f64 {
    -(logp_ref - logp_theta).exp_m1()
}

/// One group ready for the loss: advantages plus summed action-token
/// log-probabilities per trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub advantages: Vec<f64>,
    pub logp_theta: Vec<f64>,
    pub logp_ref: Option<Vec<f64>>,
}

/// Loss value and its derivative with respect to each trajectory's
/// summed log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateLoss {
    pub value: f64,
    pub grad_logp: Vec<f64>,
    pub kl: Vec<f64>,
}

impl SurrogateLoss {
    pub fn kl_mean(&self) -> f64 {
        if self.kl.is_empty() {
            0.0
        } else {
            self.kl.iter().sum::<f64>() / self.kl.len() as f64
        }
    }
}

/// Loss at `group.logp_theta` with the detached copy held at `detached`.
/// With `detached == logp_theta` this is the on-policy loss.
pub fn surrogate_loss(group: &ScoredGroup, detached: &[f64], beta: f64) -> Result<SurrogateLoss, RgrpoError> {
    let m = group.advantages.len();
    if m < 2 {
        return Err(RgrpoError::GroupTooSmall(m));
    }
    if group.logp_theta.len() != m || detached.len() != m {
        return Err(RgrpoError::LengthMismatch(format!(
            "{} advantages, {} log-probs, {} detached",
            m,
            group.logp_theta.len(),
            detached.len()
        )));
    }
    let logp_ref = match (&group.logp_ref, beta > 0.0) {
        (Some(r), _) if r.len() != m => {
            return Err(RgrpoError::LengthMismatch(format!("{} reference log-probs for {m}", r.len())))
        }
        (Some(r), _) => Some(r.as_slice()),
        (None, true) => return Err(RgrpoError::MissingReference(beta)),
        (None, false) => None,
    };

    let scale = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grad_logp = Vec::with_capacity(m);
    let mut kl = Vec::with_capacity(m);
    for i in 0..m {
        let lp = group.logp_theta[i];
        let ratio = (lp - detached[i]).exp();
        let a = group.advantages[i];
        let (k, dk) = match logp_ref {
            Some(r) => (kl_estimate(lp, r[i]), kl_grad(lp, r[i])),
            None => (0.0, 0.0),
        };
        kl.push(k);
        let mut term = ratio * a;
        let mut dterm = ratio * a;
        if beta > 0.0 {
            term -= beta * k;
            dterm -= beta * dk;
        }
        value -= scale * term;
        grad_logp.push(-scale * dterm);
    }
    Ok(SurrogateLoss { value, grad_logp, kl })
}

pub fn rgrpo_loss(group: &ScoredGroup, beta: f64) -> Result<SurrogateLoss, RgrpoError> {
    surrogate_loss(group, &group.logp_theta, beta)
}

/// Mean negative log-likelihood over action tokens.
pub fn sft_loss(logprobs: &[f64], mask: &TokenMask) -> Result<f64, RgrpoError> {
    let n = mask.action_count();
    if n == 0 {
        return Err(RgrpoError::EmptyMask);
    }
    Ok(-mask.masked_sum(logprobs)? / n as f64)
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_acc: f64,
    pub mean_r_format: f64,
    pub mean_r_valid: f64,
    pub mean_r_length: f64,
    pub advantage_std: f64,
    pub loss: f64,
    pub kl_mean: f64,
    pub valid_crop_rate: f64,
    pub groups: usize,
    pub discarded_groups: usize,
    pub param_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, EpisodeFlags, RegionRef, Segment};
    use proptest::prelude::*;

    #[test]
    fn zero_variance_group() {
        assert_eq!(normalize_advantages(&[1.0; 5]).unwrap(), vec![0.0; 5]);
        assert_eq!(normalize_advantages(&[1.1, 1.1, 1.1]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn worked_group() {
        // mean 1.3, population variance 0.76; values from a 50-digit
        // decimal evaluation of (r - 1.3) / sqrt(0.76)
        let expected = [
            1.663_264_070_561_572_8,
            -0.057_353_933_467_640_44,
            -1.491_202_270_158_651_5,
            -0.057_353_933_467_640_44,
            -0.057_353_933_467_640_44,
        ];
        let got = normalize_advantages(&[2.75, 1.25, 0.0, 1.25, 1.25]).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn group_too_small() {
        assert_eq!(normalize_advantages(&[1.0]), Err(RgrpoError::GroupTooSmall(1)));
        assert_eq!(normalize_advantages(&[]), Err(RgrpoError::GroupTooSmall(0)));
    }

    #[test]
    fn kl_spot_values() {
        assert_eq!(kl_estimate(-3.0, -3.0), 0.0);
        assert!((kl_estimate(0.0, 1.0) - (std::f64::consts::E - 2.0)).abs() < 1e-12);
        let x: f64 = 0.5;
        assert!((kl_estimate(0.0, x.ln()) - (0.5 + std::f64::consts::LN_2 - 1.0)).abs() < 1e-12);
        assert!(kl_estimate(0.0, 1e-9) > 0.0);
    }

    fn traj(segments: Vec<Segment>, text_len: usize) -> Trajectory {
        Trajectory {
            question_id: "q".into(),
            seed: 0,
            transcript: "x".repeat(text_len),
            segments,
            crop_actions: vec![],
            think_text: None,
            answer_text: None,
            format_ok: true,
            reward: None,
            token_logprobs: None,
            flags: EpisodeFlags::default(),
        }
    }

    fn text(chars: (usize, usize), tokens: (usize, usize)) -> Segment {
        Segment {
            kind: SegmentKind::ModelText { char_span: chars },
            token_span: tokens,
        }
    }

    fn injected(tokens: (usize, usize)) -> Segment {
        Segment {
            kind: SegmentKind::InjectedImage {
                region: RegionRef {
                    bbox: BBox::full(2, 2),
                    scale: 1.0,
                    width: 2,
                    height: 2,
                },
            },
            token_span: tokens,
        }
    }

    #[test]
    fn mask_from_segments() {
        let t = traj(vec![text((0, 4), (0, 10)), injected((10, 15)), text((4, 8), (15, 22))], 8);
        let mask = action_mask(&t).unwrap();
        let expect: Vec<bool> = [vec![true; 10], vec![false; 5], vec![true; 7]].concat();
        assert_eq!(mask.0, expect);

        let plain = traj(vec![text((0, 3), (0, 3)), text((3, 5), (3, 6))], 5);
        assert!(action_mask(&plain).unwrap().0.iter().all(|&b| b));

        let broken = traj(vec![text((0, 3), (0, 3)), injected((4, 6))], 3);
        assert!(matches!(action_mask(&broken), Err(RgrpoError::Core(CoreError::SpanMismatch(_)))));
    }

    #[test]
    fn loss_with_zero_advantages() {
        let g = ScoredGroup {
            advantages: vec![0.0; 3],
            logp_theta: vec![-1.0, -2.0, -3.0],
            logp_ref: None,
        };
        let l = rgrpo_loss(&g, 0.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_logp.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn on_policy_gradient_is_advantage_weighted() {
        let adv = normalize_advantages(&[1.0, 0.0, 2.0, 0.5]).unwrap();
        let g = ScoredGroup {
            advantages: adv.clone(),
            logp_theta: vec![-4.0, -2.5, -7.0, -1.0],
            logp_ref: None,
        };
        let l = rgrpo_loss(&g, 0.0).unwrap();
        let mean_adv = adv.iter().sum::<f64>() / 4.0;
        assert!((l.value + mean_adv).abs() < 1e-15);
        for (d, a) in l.grad_logp.iter().zip(&adv) {
            assert!((d + a / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_requires_reference() {
        let g = ScoredGroup {
            advantages: vec![1.0, -1.0],
            logp_theta: vec![-1.0, -2.0],
            logp_ref: None,
        };
        assert_eq!(rgrpo_loss(&g, 0.1), Err(RgrpoError::MissingReference(0.1)));
    }

    #[test]
    fn beta_shifts_loss_by_mean_kl() {
        let g = ScoredGroup {
            advantages: vec![1.0, -1.0, 0.5, -0.5],
            logp_theta: vec![-1.0, -2.0, -3.0, -0.5],
            logp_ref: Some(vec![-1.5, -1.0, -3.0, -2.0]),
        };
        let a = rgrpo_loss(&g, 0.0).unwrap();
        let b = rgrpo_loss(&g, 0.05).unwrap();
        assert!((b.value - a.value - 0.05 * b.kl_mean()).abs() < 1e-15);
    }

    /// Finite differences of the loss in each log-probability with the
    /// detached copy frozen at the evaluation point.
    #[test]
    fn grad_matches_finite_differences() {
        let g = ScoredGroup {
            advantages: vec![0.7, -1.2, 0.5],
            logp_theta: vec![-1.0, -2.0, -0.3],
            logp_ref: Some(vec![-1.4, -1.1, -0.9]),
        };
        let detached = g.logp_theta.clone();
        let beta = 0.3;
        let analytic = surrogate_loss(&g, &detached, beta).unwrap().grad_logp;
        let h = 1e-6;
        for i in 0..3 {
            let eval = |delta: f64| {
                let mut lp = g.logp_theta.clone();
                lp[i] += delta;
                // independent evaluation of the loss formula
                let r = g.logp_ref.as_ref().unwrap();
                -(0..3)
                    .map(|j| {
                        let x = (r[j] - lp[j]).exp();
                        (lp[j] - detached[j]).exp() * g.advantages[j] - beta * (x - x.ln() - 1.0)
                    })
                    .sum::<f64>()
                    / 3.0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "{fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn sft_cases() {
        let mask = TokenMask(vec![true, true, false, true]);
        assert_eq!(sft_loss(&[0.0, 0.0, -1e9, 0.0], &mask).unwrap(), 0.0);
        let v: f64 = 50.0;
        let l = sft_loss(&[-v.ln(), -v.ln(), 0.0, -v.ln()], &mask).unwrap();
        assert!((l - v.ln()).abs() < 1e-12);
        let a = sft_loss(&[-0.2, -0.4, -3.0, -0.6], &mask).unwrap();
        let b = sft_loss(&[-0.2, -0.4, f64::NEG_INFINITY, -0.6], &mask).unwrap();
        assert_eq!(a, b);
        assert_eq!(sft_loss(&[-1.0], &TokenMask(vec![false])), Err(RgrpoError::EmptyMask));
    }

    proptest! {
        #[test]
        fn advantages_standardised(rewards in prop::collection::vec(0.0f64..2.75, 2..9), shift in -5.0f64..5.0) {
            let a = normalize_advantages(&rewards).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let b = normalize_advantages(&shifted).unwrap();
            if a.iter().any(|&x| x != 0.0) {
                let m = a.len() as f64;
                let mean = a.iter().sum::<f64>() / m;
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn kl_non_negative(a in -60.0f64..0.0, b in -60.0f64..0.0) {
            let k = kl_estimate(a, b);
            prop_assert!(k >= 0.0);
            prop_assert_eq!(k == 0.0, a == b);
        }
    }
}
