//! A backend that replays fixed transcripts one character per token.

use crate::backend::{
    BackendError, Capabilities, Decoding, EpisodeContext, Generation, PolicyBackend, PolicySession, SequenceScores,
    StopPredicate,
};
use crate::types::Trajectory;
use crate::vision::RegionEvidence;

/// Replays `scripts[seed % scripts.len()]`. Every character is a token
/// with log-probability 0; each injection occupies `feature_len`
/// positions.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    scripts: Vec<String>,
    feature_len: usize,
    can_inject: bool,
}

impl ScriptedBackend {
    pub fn new(script: impl Into<String>) -> Self {
        Self::per_seed(vec![script.into()])
    }

    pub fn per_seed(scripts: Vec<String>) -> Self {
        assert!(!scripts.is_empty(), "at least one script");
        ScriptedBackend {
            scripts,
            feature_len: 4,
            can_inject: true,
        }
    }

    pub fn with_feature_len(mut self, n: usize) -> Self {
        self.feature_len = n;
        self
    }

    pub fn text_only(mut self) -> Self {
        self.can_inject = false;
        self
    }
}

struct ScriptedSession<'a> {
    chars: Vec<char>,
    pos: usize,
    backend: &'a ScriptedBackend,
}

impl PolicySession for ScriptedSession<'_> {
    fn generate_until(&mut self, stop: &StopPredicate<'_>, max_tokens: usize) -> Result<Generation, BackendError> {
        let mut text = String::new();
        let mut n = 0;
        while self.pos < self.chars.len() && n < max_tokens {
            text.push(self.chars[self.pos]);
            self.pos += 1;
            n += 1;
            if stop(&text) {
                break;
            }
        }
        Ok(Generation {
            text,
            token_count: n,
            logprobs: Some(vec![0.0; n]),
            finished: self.pos >= self.chars.len(),
        })
    }

    fn inject_image(&mut self, _evidence: &RegionEvidence) -> Result<usize, BackendError> {
        if !self.backend.can_inject {
            return Err(BackendError::Unsupported("inject_image"));
        }
        Ok(self.backend.feature_len)
    }
}

impl PolicyBackend for ScriptedBackend {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            can_train: false,
            can_inject_images: self.can_inject,
            concurrent_safe: true,
        }
    }

    fn start_episode<'a>(
        &'a self,
        _ctx: EpisodeContext<'a>,
        seed: u64,
        _decoding: Decoding,
    ) -> Result<Box<dyn PolicySession + 'a>, BackendError> {
        let script = &self.scripts[(seed % self.scripts.len() as u64) as usize];
        Ok(Box::new(ScriptedSession {
            chars: script.chars().collect(),
            pos: 0,
            backend: self,
        }))
    }

    fn score_sequence(&self, _ctx: EpisodeContext<'_>, trajectory: &Trajectory) -> Result<SequenceScores, BackendError> {
        for seg in &trajectory.segments {
            if let Some(text) = trajectory.segment_text(seg) {
                if text.chars().count() != seg.token_len() {
                    return Err(BackendError::Alignment(format!(
                        "{} characters in a {}-token segment",
                        text.chars().count(),
                        seg.token_len()
                    )));
                }
            }
        }
        let n = trajectory.token_count();
        Ok(SequenceScores {
            current: vec![0.0; n],
            reference: vec![0.0; n],
        })
    }
}
