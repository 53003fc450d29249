//! Word-level vocabulary for the toy policy and the decoding grammar that
//! keeps every generated transcript well formed.

use crate::backend::BackendError;
use crate::toolcall::{ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};

use super::task::{ToyTask, FEATURE_LEN};

pub const THINK_OPEN_ID: usize = 0;
pub const THINK_CLOSE_ID: usize = 1;
pub const ANSWER_OPEN_ID: usize = 2;
pub const ANSWER_CLOSE_ID: usize = 3;

pub const FILLERS: [&str; 10] = [
    " I",
    " look",
    " at",
    " the",
    " highlighted",
    " cell.",
    " It",
    " shows",
    " a",
    " symbol.",
];

/// Joint vocabulary: text tokens followed by `FEATURE_LEN` reserved
/// feature positions for injected regions.
#[derive(Debug, Clone)]
pub struct ToyVocab {
    texts: Vec<String>,
    filler_start: usize,
    crop_start: usize,
    symbol_start: usize,
    feature_start: usize,
    cells: usize,
    symbols: usize,
}

impl ToyVocab {
    pub fn new(task: &ToyTask) -> Self {
        let mut texts: Vec<String> = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let filler_start = texts.len();
        texts.extend(FILLERS.iter().map(|s| s.to_string()));
        let crop_start = texts.len();
        // Crop tokens are padded to one width (inside the object, where the
        // think-block trim cannot remove it): the length reward would
        // otherwise prefer cells whose coordinates have more digits.
        let commands: Vec<String> = (0..task.cells()).map(|c| task.cell_bbox(c).to_command()).collect();
        let width = commands.iter().map(|c| c.len()).max().unwrap_or(0);
        texts.extend(commands.iter().map(|c| {
            let pad = " ".repeat(width - c.len());
            format!(" {}", c.replacen(": [", &format!(": {pad}["), 1))
        }));
        let symbol_start = texts.len();
        texts.extend((0..task.symbols()).map(|k| task.symbol_name(k).to_string()));
        let feature_start = texts.len();
        ToyVocab {
            texts,
            filler_start,
            crop_start,
            symbol_start,
            feature_start,
            cells: task.cells(),
            symbols: task.symbols(),
        }
    }

    /// Text tokens plus feature positions.
    pub fn size(&self) -> usize {
        self.feature_start + FEATURE_LEN
    }

    /// Embedding row used before the first token.
    pub fn bos(&self) -> usize {
        self.size()
    }

    pub fn text(&self, id: usize) -> &str {
        &self.texts[id]
    }

    pub fn fillers(&self) -> std::ops::Range<usize> {
        self.filler_start..self.crop_start
    }

    pub fn crop_id(&self, cell: usize) -> usize {
        self.crop_start + cell
    }

    pub fn crops(&self) -> std::ops::Range<usize> {
        self.crop_start..self.crop_start + self.cells
    }

    pub fn symbol_id(&self, k: usize) -> usize {
        self.symbol_start + k
    }

    pub fn symbols(&self) -> std::ops::Range<usize> {
        self.symbol_start..self.symbol_start + self.symbols
    }

    pub fn feature_id(&self, j: usize) -> usize {
        self.feature_start + j
    }

    pub fn features(&self) -> std::ops::Range<usize> {
        self.feature_start..self.size()
    }

    pub fn id_of(&self, text: &str) -> Option<usize> {
        self.texts.iter().position(|t| t == text)
    }

    /// Greedy longest-match tokenization into text token ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, BackendError> {
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let best = self
                .texts
                .iter()
                .enumerate()
                .filter(|(_, t)| rest.starts_with(t.as_str()))
                .max_by_key(|(_, t)| t.len())
                .map(|(i, _)| i)
                .ok_or_else(|| {
                    BackendError::Alignment(format!("no token matches {:?}", rest.chars().take(16).collect::<String>()))
                })?;
            ids.push(best);
            rest = &rest[self.texts[best].len()..];
        }
        Ok(ids)
    }
}

/// Decoding grammar: `<think>` (filler | crop)* `</think>` `<answer>`
/// symbol `</answer>`, with the think block capped at a fixed length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Start,
    Think(usize),
    AfterThink,
    Answer,
    AfterSymbol,
    Done,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    start: Vec<usize>,
    think_open: Vec<usize>,
    think_full: Vec<usize>,
    after_think: Vec<usize>,
    answer: Vec<usize>,
    after_symbol: Vec<usize>,
    features: Vec<usize>,
    max_think_tokens: usize,
}

impl Grammar {
    pub fn new(vocab: &ToyVocab, max_think_tokens: usize) -> Self {
        let mut think_open: Vec<usize> = vocab.fillers().chain(vocab.crops()).collect();
        think_open.push(THINK_CLOSE_ID);
        Grammar {
            start: vec![THINK_OPEN_ID],
            think_open,
            think_full: vec![THINK_CLOSE_ID],
            after_think: vec![ANSWER_OPEN_ID],
            answer: vocab.symbols().collect(),
            after_symbol: vec![ANSWER_CLOSE_ID],
            features: vocab.features().collect(),
            max_think_tokens,
        }
    }

    pub fn legal(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Start => &self.start,
            Phase::Think(n) if n < self.max_think_tokens => &self.think_open,
            Phase::Think(_) => &self.think_full,
            Phase::AfterThink => &self.after_think,
            Phase::Answer => &self.answer,
            Phase::AfterSymbol => &self.after_symbol,
            Phase::Done => &[],
        }
    }

    pub fn feature_positions(&self) -> &[usize] {
        &self.features
    }

    pub fn advance(&self, phase: Phase, token: usize) -> Phase {
        match phase {
            Phase::Start => Phase::Think(0),
            Phase::Think(_) if token == THINK_CLOSE_ID => Phase::AfterThink,
            Phase::Think(n) => Phase::Think(n + 1),
            Phase::AfterThink => Phase::Answer,
            Phase::Answer => Phase::AfterSymbol,
            Phase::AfterSymbol | Phase::Done => Phase::Done,
        }
    }
}
