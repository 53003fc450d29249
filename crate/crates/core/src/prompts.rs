//! Prompt templates, embedded byte-for-byte.

pub const SYSTEM_INSTRUCTION: &str = include_str!("prompts/system_instruction.txt");
/// Rationale generation from a question alone.
pub const CONSTRUCT_FROM_QA: &str = include_str!("prompts/construct_from_qa.txt");
/// Rationale generation around a given crop command.
pub const CONSTRUCT_FROM_BBOX: &str = include_str!("prompts/construct_from_bbox.txt");
/// Region-validity filter, sent with the cropped image.
pub const FILTER_REGION: &str = include_str!("prompts/filter_region.txt");
/// Reasoning-quality filter.
pub const FILTER_REASONING: &str = include_str!("prompts/filter_reasoning.txt");

pub const QUESTION: &str = "{question}";
pub const CROP: &str = "{crop}";
pub const GROUND_TRUTH: &str = "{ground-truth answer}";
pub const REASONING: &str = "{reasoning process}";

/// Substitute placeholders in a single left-to-right pass, so values that
/// themselves contain placeholder text are inserted literally. Unknown
/// braces (such as the example command object) are left alone.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while !rest.is_empty() {
        if rest.starts_with('{') {
            for (key, value) in values {
                if let Some(tail) = rest.strip_prefix(key) {
                    out.push_str(value);
                    rest = tail;
                    continue 'outer;
                }
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

pub fn construct_from_qa(question: &str) -> String {
    render(CONSTRUCT_FROM_QA, &[(QUESTION, question)])
}

pub fn construct_from_bbox(question: &str, crop: &str) -> String {
    render(CONSTRUCT_FROM_BBOX, &[(QUESTION, question), (CROP, crop)])
}

pub fn filter_reasoning(question: &str, ground_truth: &str, reasoning: &str) -> String {
    render(
        FILTER_REASONING,
        &[(QUESTION, question), (GROUND_TRUTH, ground_truth), (REASONING, reasoning)],
    )
}
