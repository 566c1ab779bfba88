//! Evaluation of versions against gold snapshot splits.

use serde::{Deserialize, Serialize};

use super::{LifecycleError, VersionPayload, VersionRecord};
use crate::classify::client::CompletionClient;
use crate::classify::prompt::{classify_p, PromptTemplate};
use crate::classify::reference::ModelArtifact;
use crate::classify::{ClassifyError, Label};
use crate::exec::Exec;
use crate::goldset::{DatasetSnapshot, GoldExample, Split};
use crate::ingest::Message;

/// Confusion counts with CT as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: Label, gold: Label) {
        match (predicted, gold) {
            (Label::Ct, Label::Ct) => self.tp += 1,
            (Label::Ct, Label::NotCt) => self.fp += 1,
            (Label::NotCt, Label::Ct) => self.fn_ += 1,
            (Label::NotCt, Label::NotCt) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version_id: String,
    pub snapshot_id: String,
    pub split: Split,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Prompt responses that never yielded a label; scored as errors.
    pub unparseable_count: u64,
}

impl EvalReport {
    /// Precision and recall are 0 when their denominators are 0, and so is
    /// F1 when both are 0.
    pub fn from_confusion(
        version_id: impl Into<String>,
        snapshot_id: impl Into<String>,
        split: Split,
        confusion: Confusion,
        unparseable_count: u64,
    ) -> Self {
        let Confusion { tp, fp, fn_, tn } = confusion;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        EvalReport {
            version_id: version_id.into(),
            snapshot_id: snapshot_id.into(),
            split,
            confusion,
            accuracy: ratio(tp + tn, confusion.total()),
            precision,
            recall,
            f1,
            unparseable_count,
        }
    }

    pub fn is_consistent(&self) -> bool {
        let again = EvalReport::from_confusion(
            self.version_id.clone(),
            self.snapshot_id.clone(),
            self.split,
            self.confusion,
            self.unparseable_count,
        );
        again == *self
    }
}

fn eval_split(snapshot: &DatasetSnapshot, split: Split) -> Result<Vec<&GoldExample>, LifecycleError> {
    if split == Split::Train {
        return Err(LifecycleError::InvalidSplit(split));
    }
    let examples = snapshot.split(split);
    if examples.is_empty() {
        return Err(LifecycleError::EmptySplit { snapshot_id: snapshot.snapshot_id.clone(), split });
    }
    Ok(examples)
}

pub fn evaluate_model(
    version_id: &str,
    artifact: &ModelArtifact,
    snapshot: &DatasetSnapshot,
    split: Split,
    exec: Exec,
) -> Result<EvalReport, LifecycleError> {
    let examples = eval_split(snapshot, split)?;
    let predicted = exec.map(&examples, |g| artifact.predict(&g.text).label);
    let mut confusion = Confusion::default();
    for (p, g) in predicted.into_iter().zip(&examples) {
        confusion.record(p, g.label);
    }
    Ok(EvalReport::from_confusion(version_id, &snapshot.snapshot_id, split, confusion, 0))
}

/// Few-shot examples come from the same snapshot's train split.
pub fn evaluate_prompt(
    version_id: &str,
    template: &PromptTemplate,
    snapshot: &DatasetSnapshot,
    split: Split,
    client: &dyn CompletionClient,
    exec: Exec,
) -> Result<EvalReport, LifecycleError> {
    template.validate()?;
    let examples = eval_split(snapshot, split)?;
    let pool = snapshot.split_owned(Split::Train);
    let outcomes = exec.map(&examples, |g| {
        let message = Message::new(g.channel_id.clone(), g.message_id, g.created_at, &g.text);
        classify_p(&message, version_id, template, &pool, client, g.created_at).map(|c| c.label)
    });
    let mut confusion = Confusion::default();
    let mut unparseable = 0;
    for (outcome, g) in outcomes.into_iter().zip(&examples) {
        match outcome {
            Ok(label) => confusion.record(label, g.label),
            Err(ClassifyError::Unparseable) => {
                unparseable += 1;
                confusion.record(g.label.negate(), g.label);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(EvalReport::from_confusion(version_id, &snapshot.snapshot_id, split, confusion, unparseable))
}

/// Evaluates either pathway; prompt versions need a client.
pub fn evaluate(
    version: &VersionRecord,
    snapshot: &DatasetSnapshot,
    split: Split,
    client: Option<&dyn CompletionClient>,
    exec: Exec,
) -> Result<EvalReport, LifecycleError> {
    match &version.payload {
        VersionPayload::Model(artifact) => evaluate_model(&version.version_id, artifact, snapshot, split, exec),
        VersionPayload::Prompt(template) => {
            let client = client.ok_or(LifecycleError::ClientRequired)?;
            evaluate_prompt(&version.version_id, template, snapshot, split, client, exec)
        }
    }
}
