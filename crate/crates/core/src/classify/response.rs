//! Label extraction from free-form model output.
//!
//! A JSON object with a `"label"` field is honored first. Otherwise the
//! text is lowercased, whitespace runs are collapsed and the first label
//! token on word boundaries wins; when several tokens start at the same
//! position the longest one is taken, so "not a conspiracy" beats
//! "conspiracy" and "not_ct" beats "ct".

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use super::Label;

/// Confidence assumed when the model does not report one.
pub const DEFAULT_CONFIDENCE: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParsedResponse {
    pub label: Label,
    pub confidence: f64,
    /// Whether the confidence came from the response rather than the
    /// default.
    pub reported: bool,
}

const TOKENS: &[(&str, Label)] = &[
    ("not a conspiracy", Label::NotCt),
    ("conspiracy", Label::Ct),
    ("not_ct", Label::NotCt),
    ("not-ct", Label::NotCt),
    ("not ct", Label::NotCt),
    ("ct", Label::Ct),
];

static CONFIDENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)confidence\W{0,4}?\s*([0-9]*\.?[0-9]+)\s*(%?)"#).expect("static regex")
});

/// Returns `None` when no label can be found.
pub fn parse_response(raw: &str) -> Option<ParsedResponse> {
    parse_json(raw).or_else(|| {
        let label = scan_label(raw)?;
        Some(with_confidence(label, extract_confidence(raw)))
    })
}

fn with_confidence(label: Label, confidence: Option<f64>) -> ParsedResponse {
    ParsedResponse { label, confidence: confidence.unwrap_or(DEFAULT_CONFIDENCE), reported: confidence.is_some() }
}

fn parse_json(raw: &str) -> Option<ParsedResponse> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end <= start {
        return None;
    }
    let obj = serde_json::from_str::<Value>(&raw[start..=end]).ok()?;
    let label = scan_label(obj.get("label")?.as_str()?)?;
    let confidence = match obj.get("confidence") {
        Some(Value::Number(n)) => n.as_f64(),
        Some(Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|c| (0.0..=1.0).contains(c));
    Some(with_confidence(label, confidence))
}

fn scan_label(text: &str) -> Option<Label> {
    let normalized: Vec<char> = collapse_whitespace(&text.to_lowercase()).chars().collect();
    let word = |i: usize| normalized.get(i).is_some_and(|c| c.is_alphanumeric());
    (0..normalized.len()).filter(|&i| i == 0 || !word(i - 1)).find_map(|i| {
        TOKENS
            .iter()
            .filter(|(tok, _)| {
                let len = tok.chars().count();
                i + len <= normalized.len() && normalized[i..i + len].iter().copied().eq(tok.chars()) && !word(i + len)
            })
            .max_by_key(|(tok, _)| tok.len())
            .map(|&(_, label)| label)
    })
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn extract_confidence(raw: &str) -> Option<f64> {
    let caps = CONFIDENCE.captures(raw)?;
    let value: f64 = caps.get(1)?.as_str().parse().ok()?;
    let value = if caps.get(2).is_some_and(|m| !m.as_str().is_empty()) { value / 100.0 } else { value };
    (0.0..=1.0).contains(&value).then_some(value)
}
