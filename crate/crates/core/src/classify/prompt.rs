//! Prompt pathway: few-shot example selection, prompt rendering and
//! classification through a [`CompletionClient`].

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::client::CompletionClient;
use super::response::parse_response;
use super::{Classification, ClassifyError, Label, Pathway};
use crate::goldset::{GoldExample, Split};
use crate::ingest::Message;
use crate::text::tokens;
use crate::time::Timestamp;

pub const MESSAGE_SLOT: &str = "{message}";
pub const EXAMPLES_SLOT: &str = "{examples}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionStrategy {
    RandomSeeded,
    TokenOverlap,
    ClassBalanced,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 3] =
        [SelectionStrategy::RandomSeeded, SelectionStrategy::TokenOverlap, SelectionStrategy::ClassBalanced];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::RandomSeeded => "RANDOM_SEEDED",
            SelectionStrategy::TokenOverlap => "TOKEN_OVERLAP",
            SelectionStrategy::ClassBalanced => "CLASS_BALANCED",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_text: String,
    pub k_shot: usize,
    pub selection_strategy: SelectionStrategy,
    pub selection_seed: u64,
}

impl PromptTemplate {
    pub fn zero_shot(template_text: impl Into<String>) -> Self {
        PromptTemplate {
            template_text: template_text.into(),
            k_shot: 0,
            selection_strategy: SelectionStrategy::RandomSeeded,
            selection_seed: 0,
        }
    }

    /// `{message}` must appear exactly once, `{examples}` at most once and
    /// is required when `k_shot > 0`.
    pub fn validate(&self) -> Result<(), ClassifyError> {
        let messages = self.template_text.matches(MESSAGE_SLOT).count();
        let examples = self.template_text.matches(EXAMPLES_SLOT).count();
        if messages != 1 {
            return Err(ClassifyError::MalformedTemplate(format!(
                "{MESSAGE_SLOT} must appear exactly once, found {messages}"
            )));
        }
        if examples > 1 {
            return Err(ClassifyError::MalformedTemplate(format!("{EXAMPLES_SLOT} appears {examples} times")));
        }
        if self.k_shot > 0 && examples == 0 {
            return Err(ClassifyError::MalformedTemplate(format!(
                "k_shot = {} but the template has no {EXAMPLES_SLOT}",
                self.k_shot
            )));
        }
        Ok(())
    }
}

/// Picks `template.k_shot` train-split examples for `message`, never the
/// message itself. A pure function of the pool contents, strategy, seed and
/// message; pool order does not matter.
pub fn select_examples(
    template: &PromptTemplate,
    pool: &[GoldExample],
    message: &Message,
) -> Result<Vec<GoldExample>, ClassifyError> {
    let k = template.k_shot;
    if k == 0 {
        return Ok(Vec::new());
    }
    let own_key = message.key();
    let mut candidates: Vec<&GoldExample> =
        pool.iter().filter(|g| g.split == Split::Train && g.key() != own_key).collect();
    candidates.sort_by_key(|g| g.key());
    let mut rng = ChaCha8Rng::seed_from_u64(template.selection_seed);

    let picked: Vec<&GoldExample> = match template.selection_strategy {
        SelectionStrategy::RandomSeeded => {
            if candidates.len() < k {
                return Err(insufficient(k, candidates.len(), "train examples"));
            }
            sample(&mut rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
        }
        SelectionStrategy::TokenOverlap => {
            if candidates.len() < k {
                return Err(insufficient(k, candidates.len(), "train examples"));
            }
            let wanted: BTreeSet<String> = tokens(&message.text).into_iter().collect();
            let mut scored: Vec<(usize, &GoldExample)> = candidates
                .into_iter()
                .map(|g| {
                    let own: BTreeSet<String> = tokens(&g.text).into_iter().collect();
                    (own.intersection(&wanted).count(), g)
                })
                .collect();
            // Stable sort keeps the key-ascending order among equal overlaps.
            scored.sort_by_key(|s| std::cmp::Reverse(s.0));
            scored.into_iter().take(k).map(|(_, g)| g).collect()
        }
        SelectionStrategy::ClassBalanced => {
            let (ct, not_ct): (Vec<&GoldExample>, Vec<&GoldExample>) =
                candidates.into_iter().partition(|g| g.label == Label::Ct);
            let (want_ct, want_not) = (k.div_ceil(2), k / 2);
            if ct.len() < want_ct || not_ct.len() < want_not {
                return Err(insufficient(
                    k,
                    ct.len().min(not_ct.len()),
                    "train examples in the smaller class",
                ));
            }
            let ct: Vec<&GoldExample> = sample(&mut rng, ct.len(), want_ct).into_iter().map(|i| ct[i]).collect();
            let not_ct: Vec<&GoldExample> =
                sample(&mut rng, not_ct.len(), want_not).into_iter().map(|i| not_ct[i]).collect();
            (0..want_ct).flat_map(|i| std::iter::once(ct[i]).chain(not_ct.get(i).copied())).collect()
        }
    };
    Ok(picked.into_iter().cloned().collect())
}

fn insufficient(k: usize, have: usize, what: &str) -> ClassifyError {
    ClassifyError::InsufficientExamples(format!("need {k}, have {have} {what}"))
}

/// Substitutes the placeholders in one pass, so braces inside example or
/// message text are never re-expanded.
pub fn render_prompt(
    template: &PromptTemplate,
    examples: &[GoldExample],
    message: &Message,
) -> Result<String, ClassifyError> {
    template.validate()?;
    if examples.len() != template.k_shot {
        return Err(ClassifyError::ExampleCount { expected: template.k_shot, got: examples.len() });
    }
    if let Some(leak) = examples.iter().find(|g| g.split != Split::Train) {
        return Err(ClassifyError::SplitLeakage(leak.key()));
    }
    let blocks = examples
        .iter()
        .map(|g| format!("Text: {}\nLabel: {}", g.text, g.label))
        .collect::<Vec<_>>()
        .join("\n\n");

    let mut out = String::with_capacity(template.template_text.len() + blocks.len() + message.text.len());
    let mut rest = template.template_text.as_str();
    loop {
        let next = [(MESSAGE_SLOT, message.text.as_str()), (EXAMPLES_SLOT, blocks.as_str())]
            .into_iter()
            .filter_map(|(slot, value)| rest.find(slot).map(|at| (at, slot, value)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, slot, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return Ok(out);
            }
        }
    }
}

/// Classifies `message` through the client. An unparseable response or a
/// client failure is retried once.
pub fn classify_p(
    message: &Message,
    version_id: &str,
    template: &PromptTemplate,
    pool: &[GoldExample],
    client: &dyn CompletionClient,
    at: Timestamp,
) -> Result<Classification, ClassifyError> {
    let examples = select_examples(template, pool, message)?;
    let prompt = render_prompt(template, &examples, message)?;
    let mut last = ClassifyError::Unparseable;
    for _ in 0..2 {
        match client.complete(&prompt) {
            Ok(text) => match parse_response(&text) {
                Some(parsed) => {
                    return Ok(Classification {
                        channel_id: message.channel_id.clone(),
                        message_id: message.message_id,
                        label: parsed.label,
                        confidence: parsed.confidence,
                        pathway: Pathway::P,
                        version_id: version_id.to_string(),
                        classified_at: at,
                    })
                }
                None => last = ClassifyError::Unparseable,
            },
            Err(e) => last = ClassifyError::ClientFailure(e.0),
        }
    }
    Err(last)
}
