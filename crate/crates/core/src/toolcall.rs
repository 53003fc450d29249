//! Transcript grammar: crop commands, think/answer tags and redundancy.
//!
//! The only structured object recognised is the crop command
//! `{"bbox_2d": [x1, y1, x2, y2]}` with four integers; whitespace between
//! its tokens is free, the key name is not.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::types::{make_bbox, BBox, CropAction};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const COMMAND_PATTERN: &str =
    r#"\{\s*"bbox_2d"\s*:\s*\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]\s*\}"#;

static COMMAND: LazyLock<Regex> = LazyLock::new(|| Regex::new(COMMAND_PATTERN).unwrap());
static TRAILING_COMMAND: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!("{COMMAND_PATTERN}\\z")).unwrap());

/// A crop command found in text, before any image-dependent validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropCommand {
    pub raw: String,
    pub coords: [i64; 4],
    /// Byte span in the scanned text.
    pub span: (usize, usize),
}

impl CropCommand {
    fn from_captures(caps: &regex::Captures<'_>, offset: usize) -> Option<Self> {
        let whole = caps.get(0)?;
        let mut coords = [0i64; 4];
        for (i, c) in coords.iter_mut().enumerate() {
            *c = caps.get(i + 1)?.as_str().parse().ok()?;
        }
        Some(CropCommand {
            raw: whole.as_str().to_string(),
            coords,
            span: (whole.start() + offset, whole.end() + offset),
        })
    }

    pub fn shifted(mut self, offset: usize) -> Self {
        self.span = (self.span.0 + offset, self.span.1 + offset);
        self
    }
}

/// Every crop command in `text`, in order of appearance.
pub fn scan_crop_commands(text: &str) -> Vec<CropCommand> {
    COMMAND
        .captures_iter(text)
        .filter_map(|caps| CropCommand::from_captures(&caps, 0))
        .collect()
}

/// The command that `text` ends with, if its final characters close one.
pub fn trailing_command(text: &str) -> Option<CropCommand> {
    if !text.ends_with('}') {
        return None;
    }
    TRAILING_COMMAND
        .captures(text)
        .and_then(|caps| CropCommand::from_captures(&caps, 0))
}

/// Byte ranges covered by `<think>` blocks. An unclosed block runs to the
/// end of the text, which is what a streaming prefix looks like.
pub fn think_regions(text: &str) -> Vec<(usize, usize)> {
    let mut regions = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(THINK_OPEN) {
        let start = cursor + rel + THINK_OPEN.len();
        match text[start..].find(THINK_CLOSE) {
            Some(close) => {
                regions.push((start, start + close));
                cursor = start + close + THINK_CLOSE.len();
            }
            None => {
                regions.push((start, text.len()));
                break;
            }
        }
    }
    regions
}

fn inside(regions: &[(usize, usize)], span: (usize, usize)) -> bool {
    regions.iter().any(|&(s, e)| span.0 >= s && span.1 <= e)
}

/// Result of parsing a finished transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedTranscript {
    pub think_text: Option<String>,
    pub answer_text: Option<String>,
    pub format_ok: bool,
    pub crop_commands: Vec<ParsedCommand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedCommand {
    pub command: CropCommand,
    pub in_think: bool,
}

fn positions(text: &str, needle: &str) -> Vec<usize> {
    text.match_indices(needle).map(|(i, _)| i).collect()
}

fn is_blank(s: &str) -> bool {
    s.chars().all(char::is_whitespace)
}

fn block_after(text: &str, open: &str, close: &str) -> Option<String> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(text[start..end].trim().to_string())
}

/// Parse a completed transcript. Total on arbitrary input.
///
/// `format_ok` holds iff the text is, up to surrounding whitespace,
/// exactly one think block followed by exactly one answer block.
pub fn parse_transcript(text: &str) -> ParsedTranscript {
    let to = positions(text, THINK_OPEN);
    let tc = positions(text, THINK_CLOSE);
    let ao = positions(text, ANSWER_OPEN);
    let ac = positions(text, ANSWER_CLOSE);

    let format_ok = match (&to[..], &tc[..], &ao[..], &ac[..]) {
        ([to], [tc], [ao], [ac]) => {
            let body_start = to + THINK_OPEN.len();
            let ans_start = ao + ANSWER_OPEN.len();
            body_start <= *tc
                && tc + THINK_CLOSE.len() <= *ao
                && ans_start <= *ac
                && is_blank(&text[..*to])
                && is_blank(&text[tc + THINK_CLOSE.len()..*ao])
                && is_blank(&text[ac + ANSWER_CLOSE.len()..])
        }
        _ => false,
    };

    let regions = think_regions(text);
    let crop_commands = scan_crop_commands(text)
        .into_iter()
        .map(|command| ParsedCommand {
            in_think: inside(&regions, command.span),
            command,
        })
        .collect();

    ParsedTranscript {
        think_text: block_after(text, THINK_OPEN, THINK_CLOSE),
        answer_text: block_after(text, ANSWER_OPEN, ANSWER_CLOSE),
        format_ok,
        crop_commands,
    }
}

/// True iff `bbox` overlaps some earlier box with IoU strictly above the
/// threshold.
pub fn is_redundant(bbox: &BBox, prior: &[BBox], iou_threshold: f64) -> bool {
    prior.iter().any(|p| bbox.iou(p) > iou_threshold)
}

/// Turn a scanned command into a [`CropAction`], validating it against
/// the image frame and the boxes already accepted in this episode.
pub fn build_action(
    command: &CropCommand,
    in_think: bool,
    turn_index: usize,
    image_dims: (u32, u32),
    prior_valid: &[BBox],
    iou_threshold: f64,
) -> CropAction {
    let [x1, y1, x2, y2] = command.coords;
    let bbox = make_bbox(x1, y1, x2, y2, image_dims).ok();
    let valid = in_think && bbox.is_some();
    let redundant = match (&bbox, valid) {
        (Some(b), true) => is_redundant(b, prior_valid, iou_threshold),
        _ => false,
    };
    CropAction {
        coords: command.coords,
        bbox,
        raw_text: command.raw.clone(),
        char_span: command.span,
        turn_index,
        in_think,
        valid,
        redundant,
        executed: false,
    }
}

/// Validate every command of a parsed transcript in order.
pub fn annotate_actions(
    parsed: &ParsedTranscript,
    image_dims: (u32, u32),
    iou_threshold: f64,
) -> Vec<CropAction> {
    let mut prior = Vec::new();
    parsed
        .crop_commands
        .iter()
        .enumerate()
        .map(|(i, pc)| {
            let action = build_action(&pc.command, pc.in_think, i, image_dims, &prior, iou_threshold);
            if action.valid {
                prior.extend(action.bbox);
            }
            action
        })
        .collect()
}
