//! Rule-based episode rewards and the exact-match answer judge.
//!
//! Four components: accuracy (0/1), format (0/1), region validity (0.5,
//! awarded once per episode) and reasoning length (0.001 per think
//! character, capped at 0.25).

use serde::{Deserialize, Serialize};

use crate::toolcall::ParsedTranscript;
use crate::types::{CropAction, RewardBreakdown, Trajectory};

pub const REGION_VALIDITY_REWARD: f64 = 0.5;
/// Characters per unit of length reward (0.001 per character).
pub const CHARS_PER_UNIT: f64 = 1000.0;
pub const LENGTH_REWARD_CAP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub lowercase: bool,
    pub strip: bool,
    pub collapse_whitespace: bool,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            lowercase: true,
            strip: true,
            collapse_whitespace: true,
        }
    }
}

impl JudgeConfig {
    pub fn normalize(&self, s: &str) -> String {
        let mut out = if self.strip { s.trim().to_string() } else { s.to_string() };
        if self.collapse_whitespace {
            let mut collapsed = String::with_capacity(out.len());
            let mut in_ws = false;
            for ch in out.chars() {
                if ch.is_whitespace() {
                    if !in_ws {
                        collapsed.push(' ');
                    }
                    in_ws = true;
                } else {
                    collapsed.push(ch);
                    in_ws = false;
                }
            }
            out = collapsed;
        }
        if self.lowercase {
            out = out.to_lowercase();
        }
        out
    }
}

pub fn exact_match(predicted: &str, ground_truth: &str, cfg: &JudgeConfig) -> f64 {
    if cfg.normalize(predicted) == cfg.normalize(ground_truth) {
        1.0
    } else {
        0.0
    }
}

pub fn accuracy_reward(trajectory: &Trajectory, ground_truth: &str, cfg: &JudgeConfig) -> f64 {
    trajectory
        .answer_text
        .as_deref()
        .map_or(0.0, |a| exact_match(a, ground_truth, cfg))
}

pub fn format_reward(parsed: &ParsedTranscript) -> f64 {
    if parsed.format_ok {
        1.0
    } else {
        0.0
    }
}

/// 0.5 as soon as one crop is valid and non-redundant; the per-episode
/// cap equals the per-crop amount, so further crops add nothing.
pub fn region_validity_reward(crop_actions: &[CropAction]) -> f64 {
    if crop_actions.iter().any(|a| a.valid && !a.redundant) {
        REGION_VALIDITY_REWARD
    } else {
        0.0
    }
}

/// Counts Unicode scalar values, not bytes.
pub fn length_reward(think_text: &str) -> f64 {
    (think_text.chars().count() as f64 / CHARS_PER_UNIT).min(LENGTH_REWARD_CAP)
}

/// Score a parsed, crop-annotated trajectory.
pub fn score(trajectory: &Trajectory, ground_truth: &str, cfg: &JudgeConfig) -> RewardBreakdown {
    RewardBreakdown::new(
        accuracy_reward(trajectory, ground_truth, cfg),
        if trajectory.format_ok { 1.0 } else { 0.0 },
        region_validity_reward(&trajectory.crop_actions),
        length_reward(trajectory.think_text.as_deref().unwrap_or("")),
    )
}

/// Score and attach the breakdown to the trajectory.
pub fn total_reward(trajectory: &mut Trajectory, ground_truth: &str, cfg: &JudgeConfig) -> RewardBreakdown {
    let r = score(trajectory, ground_truth, cfg);
    trajectory.reward = Some(r);
    r
}
