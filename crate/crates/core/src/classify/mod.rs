//! Binary conspiracy-theory classification through two pathways: the
//! locally trained reference classifier ([`reference`]) and prompting a
//! text-completion model ([`prompt`]).

pub mod client;
pub mod features;
pub mod prompt;
pub mod reference;
pub mod response;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::MessageKey;
use crate::time::Timestamp;

pub use client::{CappedClient, ClientError, CompletionClient, ScriptedClient};
pub use features::{featurize, SparseVector, FEATURE_DIM};
pub use prompt::{classify_p, render_prompt, select_examples, PromptTemplate, SelectionStrategy};
pub use reference::{train_reference, ModelArtifact, Prediction, TrainParams};
pub use response::{parse_response, ParsedResponse};

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("degenerate dataset: training data needs at least one example of each label")]
    DegenerateDataset,
    #[error("few-shot example {0} is not in the train split")]
    SplitLeakage(MessageKey),
    #[error("malformed template: {0}")]
    MalformedTemplate(String),
    #[error("expected {expected} few-shot examples, got {got}")]
    ExampleCount { expected: usize, got: usize },
    #[error("not enough train examples for selection: {0}")]
    InsufficientExamples(String),
    #[error("response could not be parsed into a label")]
    Unparseable,
    #[error("text-completion client failed: {0}")]
    ClientFailure(String),
    #[error("review threshold {0} outside [0.5, 1]")]
    InvalidThreshold(f64),
    #[error("invalid model artifact: {0}")]
    InvalidArtifact(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "NOT_CT")]
    NotCt,
}

impl Label {
    pub fn negate(self) -> Label {
        match self {
            Label::Ct => Label::NotCt,
            Label::NotCt => Label::Ct,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Ct => "CT",
            Label::NotCt => "NOT_CT",
        }
    }

    pub fn is_ct(self) -> bool {
        self == Label::Ct
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CT" => Ok(Label::Ct),
            "NOT_CT" => Ok(Label::NotCt),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pathway {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "P")]
    P,
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pathway::Ft => "FT",
            Pathway::P => "P",
        })
    }
}

/// A label with confidence, as produced by one version of one pathway.
///
/// Prompt-pathway confidences are whatever the model reported (or the
/// parser default) and are not calibrated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub channel_id: String,
    pub message_id: u64,
    pub label: Label,
    pub confidence: f64,
    pub pathway: Pathway,
    pub version_id: String,
    pub classified_at: Timestamp,
}

impl Classification {
    pub fn key(&self) -> MessageKey {
        MessageKey::new(self.channel_id.clone(), self.message_id)
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.confidence)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Triage {
    AutoAccept,
    ReviewQueue,
}

/// High-confidence outputs are pre-labeled; the rest go to analysts.
pub fn triage(confidence: f64, review_threshold: f64) -> Result<Triage, ClassifyError> {
    if !(0.5..=1.0).contains(&review_threshold) {
        return Err(ClassifyError::InvalidThreshold(review_threshold));
    }
    Ok(if confidence >= review_threshold { Triage::AutoAccept } else { Triage::ReviewQueue })
}
