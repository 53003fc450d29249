//! Yes/no quality filters over hosted models.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::FilterOutcome;
use crate::chat::{ChatClient, ChatMessage};
use crate::prompts;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Accept,
    Reject,
    /// The client kept failing or replied with nothing; retry later.
    Parked(String),
}

impl FilterDecision {
    pub fn outcome(&self) -> FilterOutcome {
        match self {
            FilterDecision::Accept => FilterOutcome::Accept,
            FilterDecision::Reject => FilterOutcome::Reject,
            FilterDecision::Parked(_) => FilterOutcome::Parked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff_ms: 200,
        }
    }
}

/// `Some(true)` iff the reply starts with "yes" after lowercasing and
/// trimming, `None` for an empty reply.
pub fn parse_filter_reply(reply: &str) -> Option<bool> {
    let norm = reply.trim().to_lowercase();
    if norm.is_empty() {
        None
    } else {
        Some(norm.starts_with("yes"))
    }
}

fn ask(client: &dyn ChatClient, messages: &[ChatMessage], policy: &RetryPolicy) -> FilterDecision {
    let mut delay = Duration::from_millis(policy.backoff_ms);
    let mut last = String::new();
    for n in 1..=policy.attempts.max(1) {
        match client.complete(messages) {
            Ok(reply) => match parse_filter_reply(&reply) {
                Some(true) => return FilterDecision::Accept,
                Some(false) => return FilterDecision::Reject,
                None => last = "empty reply".into(),
            },
            Err(e) => last = e.to_string(),
        }
        if n < policy.attempts {
            std::thread::sleep(delay);
            delay *= 2;
        }
    }
    FilterDecision::Parked(last)
}

/// Is the cropped region a complete, recognizable visual unit?
pub fn filter_region_validity(client: &dyn ChatClient, crop_png: &[u8], policy: &RetryPolicy) -> FilterDecision {
    ask(
        client,
        &[ChatMessage::with_image("user", crop_png.to_vec(), prompts::FILTER_REGION)],
        policy,
    )
}

/// Is the rationale logically sound and progressive?
pub fn filter_reasoning_quality(
    client: &dyn ChatClient,
    question: &str,
    ground_truth: &str,
    rationale: &str,
    policy: &RetryPolicy,
) -> FilterDecision {
    ask(
        client,
        &[ChatMessage::text("user", prompts::filter_reasoning(question, ground_truth, rationale))],
        policy,
    )
}
