//! Crop-reading oracle for the toy task.
//!
//! Crops the highlighted cell, then answers with the glyph decoded from
//! whatever region was actually injected. With no injection it answers
//! the first glyph, so its accuracy tracks the quality of the executed
//! boxes.

use super::task::ToyTask;
use super::vocab::ToyVocab;
use crate::backend::{
    BackendError, Capabilities, Decoding, EpisodeContext, Generation, PolicyBackend, PolicySession, StopPredicate,
};
use crate::toolcall::{ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};
use crate::vision::RegionEvidence;

const OPENING: [&str; 6] = [" I", " look", " at", " the", " highlighted", " cell."];
const CLOSING: [&str; 4] = [" It", " shows", " a", " symbol."];

#[derive(Debug, Clone)]
pub struct CropOracle {
    task: ToyTask,
    vocab: ToyVocab,
    think_budget: usize,
}

impl CropOracle {
    pub fn new(task: ToyTask) -> Self {
        let vocab = ToyVocab::new(&task);
        CropOracle {
            task,
            vocab,
            think_budget: usize::MAX,
        }
    }

    /// Cap the think block at `n` tokens (at least the crop itself), so
    /// transcripts fit a toy policy's grammar and can serve as
    /// demonstrations.
    pub fn with_think_budget(mut self, n: usize) -> Self {
        self.think_budget = n.max(1);
        self
    }

    fn think_body(&self, cell: usize) -> Vec<String> {
        let room = self.think_budget - 1;
        let before = room.min(OPENING.len());
        let after = (room - before).min(CLOSING.len());
        let mut body: Vec<String> = OPENING[..before].iter().map(|s| s.to_string()).collect();
        body.push(self.vocab.text(self.vocab.crop_id(cell)).to_string());
        body.extend(CLOSING[..after].iter().map(|s| s.to_string()));
        body
    }
}

struct OracleSession<'a> {
    oracle: &'a CropOracle,
    /// Tokens still to emit before the answer.
    queue: std::collections::VecDeque<String>,
    decoded: Option<usize>,
    answered: bool,
}

impl OracleSession<'_> {
    fn next_token(&mut self) -> Option<String> {
        if let Some(t) = self.queue.pop_front() {
            return Some(t);
        }
        if self.answered {
            return None;
        }
        self.answered = true;
        let symbol = self.decoded.unwrap_or(0);
        let name = self.oracle.task.symbol_name(symbol);
        self.queue.push_back(name.to_string());
        self.queue.push_back(ANSWER_CLOSE.to_string());
        Some(ANSWER_OPEN.to_string())
    }
}

impl PolicySession for OracleSession<'_> {
    fn generate_until(&mut self, stop: &StopPredicate<'_>, max_tokens: usize) -> Result<Generation, BackendError> {
        let mut out = Generation::default();
        while out.token_count < max_tokens {
            let Some(tok) = self.next_token() else { break };
            out.text.push_str(&tok);
            out.token_count += 1;
            if stop(&out.text) {
                break;
            }
        }
        out.finished = self.queue.is_empty() && self.answered;
        out.logprobs = Some(vec![0.0; out.token_count]);
        Ok(out)
    }

    fn inject_image(&mut self, evidence: &RegionEvidence) -> Result<usize, BackendError> {
        let pixels = evidence
            .image()
            .ok_or_else(|| BackendError::InvalidInput("region evidence without pixels".into()))?;
        self.decoded = Some(self.oracle.task.decode(&self.oracle.task.fine_features(pixels)));
        Ok(super::task::FEATURE_LEN)
    }
}

impl PolicyBackend for CropOracle {
    fn name(&self) -> String {
        "toy-oracle".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            can_train: false,
            can_inject_images: true,
            concurrent_safe: true,
        }
    }

    fn start_episode<'a>(
        &'a self,
        ctx: EpisodeContext<'a>,
        _seed: u64,
        _decoding: Decoding,
    ) -> Result<Box<dyn PolicySession + 'a>, BackendError> {
        let cell = self.task.highlighted_cell(&ctx.image.pixels);
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(THINK_OPEN.to_string());
        queue.extend(self.think_body(cell));
        queue.push_back(THINK_CLOSE.to_string());
        Ok(Box::new(OracleSession {
            oracle: self,
            queue,
            decoded: None,
            answered: false,
        }))
    }
}
