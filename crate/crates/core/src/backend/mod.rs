//! Policy backends.
//!
//! A backend opens one session per episode. The session generates text
//! until a stop predicate fires and accepts injected region evidence.
//! Trainable backends can also re-score a finished trajectory, back-
//! propagate weighted log-probabilities and apply an optimizer step.

pub mod remote;
pub mod scripted;
pub mod toy;

use crate::types::Trajectory;
use crate::vision::{RegionEvidence, WorkingImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("{0} is not supported by this backend")]
    Unsupported(&'static str),
    #[error("backend failure: {0}")]
    Failure(String),
    #[error("tokenization drift: {0}")]
    Alignment(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub can_train: bool,
    pub can_inject_images: bool,
    pub concurrent_safe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding::Sample { temperature: 1.0 }
    }
}

/// What the policy sees at the start of an episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub system_prompt: &'a str,
    pub image: &'a WorkingImage,
    pub question: &'a str,
}

/// Output of one `generate_until` call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    pub text: String,
    pub token_count: usize,
    /// Per-token log-probabilities, when the backend reports them.
    pub logprobs: Option<Vec<f64>>,
    /// The policy reached its end of sequence.
    pub finished: bool,
}

/// Log-probabilities for every token position of a trajectory, injected
/// positions included, under the current and the reference parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScores {
    pub current: Vec<f64>,
    pub reference: Vec<f64>,
}

pub type StopPredicate<'a> = dyn Fn(&str) -> bool + 'a;

pub trait PolicySession {
    /// Emit tokens until `stop` returns true on the text produced by this
    /// call, the policy finishes, or `max_tokens` is reached.
    fn generate_until(&mut self, stop: &StopPredicate<'_>, max_tokens: usize) -> Result<Generation, BackendError>;

    /// Append region evidence to the context; returns the number of
    /// context positions it occupies.
    fn inject_image(&mut self, evidence: &RegionEvidence) -> Result<usize, BackendError>;
}

pub trait PolicyBackend: Send + Sync {
    fn name(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    fn start_episode<'a>(
        &'a self,
        ctx: EpisodeContext<'a>,
        seed: u64,
        decoding: Decoding,
    ) -> Result<Box<dyn PolicySession + 'a>, BackendError>;

    fn score_sequence(&self, _ctx: EpisodeContext<'_>, _trajectory: &Trajectory) -> Result<SequenceScores, BackendError> {
        Err(BackendError::Unsupported("score_sequence"))
    }

    /// Add `sum_t token_weights[t] * grad log p(token_t)` into `grad`.
    /// Positions with weight zero are skipped.
    fn accumulate_gradient(
        &self,
        _ctx: EpisodeContext<'_>,
        _trajectory: &Trajectory,
        _token_weights: &[f64],
        _grad: &mut [f64],
    ) -> Result<(), BackendError> {
        Err(BackendError::Unsupported("accumulate_gradient"))
    }

    fn parameter_count(&self) -> usize {
        0
    }

    /// Apply one optimizer step against `grad`; returns the new parameter
    /// version.
    fn apply_update(&mut self, _grad: &[f64]) -> Result<u64, BackendError> {
        Err(BackendError::Unsupported("apply_update"))
    }

    /// Freeze the current parameters as the reference policy.
    fn snapshot_reference(&mut self) -> Result<(), BackendError> {
        Err(BackendError::Unsupported("snapshot_reference"))
    }

    fn version(&self) -> u64 {
        0
    }
}
