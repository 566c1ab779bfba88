//! Model and prompt version governance.

pub mod eval;
pub mod experiment;
pub mod registry;
pub mod rollout;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{ClassifyError, ModelArtifact, Pathway, PromptTemplate};
use crate::drift::DriftReport;
use crate::goldset::Split;
use crate::time::Timestamp;

pub use eval::{evaluate, evaluate_model, evaluate_prompt, Confusion, EvalReport};
pub use experiment::{fewshot_experiment, ExperimentCell, ExperimentReport, ExperimentSpec};
pub use registry::{Registry, RetrainJob, RetrainState, VersionEvent};
pub use rollout::{assign_variant, KeyBasis, RolloutPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum LifecycleError {
    #[error("evaluation split must be VALIDATION or TEST, got {0}")]
    InvalidSplit(Split),
    #[error("snapshot {snapshot_id} has no {split} examples")]
    EmptySplit { snapshot_id: String, split: Split },
    #[error("prompt versions need a completion client")]
    ClientRequired,
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("reports come from different snapshots ({candidate} vs {incumbent})")]
    SnapshotMismatch { candidate: String, incumbent: String },
    #[error("promotion decisions only read VALIDATION reports")]
    NotValidation,
    #[error("unknown version {0}")]
    UnknownVersion(String),
    #[error("version {0} already exists")]
    DuplicateVersion(String),
    #[error("version {version_id} is {status}, cannot {action}")]
    InvalidTransition { version_id: String, status: VersionStatus, action: &'static str },
    #[error("version {version_id} already has a TEST evaluation")]
    TestAlreadyRead { version_id: String },
    #[error("report is for {got}, expected {expected}")]
    ReportMismatch { expected: String, got: String },
    #[error("gate for {version_id} was decided against a different incumbent")]
    StaleGate { version_id: String },
    #[error("deployments need an actor and a rationale")]
    MissingRationale,
    #[error("a rollout is active for {0}")]
    RolloutActive(Pathway),
    #[error("no rollout is active")]
    NoRollout,
    #[error("invalid rollout policy: {0}")]
    InvalidPolicy(String),
    #[error("a retraining job is already queued")]
    RetrainInFlight,
    #[error("experiment grid is empty")]
    EmptyGrid,
    #[error("train split cannot supply {k} examples for {strategy}")]
    InsufficientTrainExamples { k: usize, strategy: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VersionStatus {
    Candidate,
    Validated,
    Deployed,
    Retired,
}

impl fmt::Display for VersionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VersionStatus::Candidate => "CANDIDATE",
            VersionStatus::Validated => "VALIDATED",
            VersionStatus::Deployed => "DEPLOYED",
            VersionStatus::Retired => "RETIRED",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VersionPayload {
    Model(ModelArtifact),
    Prompt(PromptTemplate),
}

impl VersionPayload {
    pub fn pathway(&self) -> Pathway {
        match self {
            VersionPayload::Model(_) => Pathway::Ft,
            VersionPayload::Prompt(_) => Pathway::P,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GovernanceAction {
    Create,
    GatePromote,
    GateReject,
    TestEvaluated,
    Deploy,
    Hotfix,
    MonitoringEvaluated,
    Retire,
    RolloutStart,
    RolloutEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GovernanceEntry {
    pub actor: String,
    pub action: GovernanceAction,
    pub rationale: String,
    pub at: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateDecision {
    Promote,
    Reject,
}

/// What a gate decision compared, kept on the candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub decision: GateDecision,
    pub snapshot_id: String,
    pub candidate_f1: f64,
    pub incumbent: Option<String>,
    pub incumbent_f1: Option<f64>,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version_id: String,
    pub pathway: Pathway,
    pub payload: VersionPayload,
    pub status: VersionStatus,
    /// Latest VALIDATION report.
    pub eval: Option<EvalReport>,
    /// Written once, when the version is deployed.
    pub test_eval: Option<EvalReport>,
    pub gate: Option<GateRecord>,
    pub governance_log: Vec<GovernanceEntry>,
    pub created_from_snapshot: String,
    pub deployed_at: Option<Timestamp>,
    /// Hotfixes only: the monitoring evaluation is due by then.
    pub review_after: Option<Timestamp>,
    pub monitoring_pending: bool,
}

impl VersionRecord {
    pub fn test_reads(&self) -> usize {
        self.governance_log.iter().filter(|e| e.action == GovernanceAction::TestEvaluated).count()
    }

    pub fn was_hotfixed(&self) -> bool {
        self.governance_log.iter().any(|e| e.action == GovernanceAction::Hotfix)
    }

    pub fn monitoring_overdue(&self, now: Timestamp) -> bool {
        self.monitoring_pending && self.review_after.is_some_and(|t| now >= t)
    }
}

/// PROMOTE iff `candidate.f1 >= incumbent.f1 + margin`. Without an
/// incumbent the first candidate is promoted.
pub fn promotion_gate(
    candidate: &EvalReport,
    incumbent: Option<&EvalReport>,
    margin: f64,
) -> Result<GateDecision, LifecycleError> {
    if candidate.split != Split::Validation || incumbent.is_some_and(|r| r.split != Split::Validation) {
        return Err(LifecycleError::NotValidation);
    }
    let Some(incumbent) = incumbent else {
        return Ok(GateDecision::Promote);
    };
    if candidate.snapshot_id != incumbent.snapshot_id {
        return Err(LifecycleError::SnapshotMismatch {
            candidate: candidate.snapshot_id.clone(),
            incumbent: incumbent.snapshot_id.clone(),
        });
    }
    Ok(if candidate.f1 >= incumbent.f1 + margin { GateDecision::Promote } else { GateDecision::Reject })
}

/// Whether a retraining job should be queued.
pub fn retrain_trigger(
    latest: Option<&DriftReport>,
    new_gold_since_training: usize,
    schedule_due: bool,
    min_new_gold: usize,
) -> bool {
    latest.is_some_and(|r| r.triggered) || new_gold_since_training >= min_new_gold || schedule_due
}

/// Due when nothing was trained yet or `interval_days` have passed.
pub fn schedule_due(last_trained_at: Option<Timestamp>, now: Timestamp, interval_days: u32) -> bool {
    match last_trained_at {
        None => true,
        Some(t) => now >= t.plus_days(i64::from(interval_days)),
    }
}
