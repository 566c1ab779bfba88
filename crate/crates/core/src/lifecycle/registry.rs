//! Version records, the deployment pointer per pathway, the active rollout
//! and the retraining queue. All changes go through [`Registry::apply`],
//! which either applies an event completely or leaves the registry as it
//! was.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rollout::{assign_variant, RolloutPolicy};
use super::{
    promotion_gate, EvalReport, GateDecision, GateRecord, GovernanceAction, GovernanceEntry, LifecycleError,
    VersionPayload, VersionRecord, VersionStatus,
};
use crate::classify::Pathway;
use crate::goldset::Split;
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VersionEvent {
    Created {
        version_id: String,
        payload: VersionPayload,
        snapshot_id: String,
        actor: String,
        rationale: String,
        at: Timestamp,
    },
    /// Gate outcome; the decision is recomputed from the reports.
    Gated {
        version_id: String,
        candidate: EvalReport,
        incumbent: Option<EvalReport>,
        margin: f64,
        actor: String,
        at: Timestamp,
    },
    Deployed {
        version_id: String,
        test_eval: EvalReport,
        actor: String,
        rationale: String,
        at: Timestamp,
    },
    Hotfixed {
        version_id: String,
        actor: String,
        rationale: String,
        review_after: Timestamp,
        at: Timestamp,
    },
    Monitored {
        version_id: String,
        report: EvalReport,
        actor: String,
        at: Timestamp,
    },
    Retired {
        version_id: String,
        actor: String,
        rationale: String,
        at: Timestamp,
    },
    RetrainQueued {
        reason: String,
        at: Timestamp,
    },
    RetrainFinished {
        gold_additions: usize,
        version_id: Option<String>,
        at: Timestamp,
    },
    RolloutStarted {
        policy: RolloutPolicy,
        actor: String,
        rationale: String,
    },
    RolloutUpdated {
        fraction_b: f64,
        actor: String,
        at: Timestamp,
    },
    RolloutEnded {
        actor: String,
        rationale: String,
        at: Timestamp,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub job_id: u64,
    pub reason: String,
    pub queued_at: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainState {
    pub queued: Option<RetrainJob>,
    pub jobs_started: u64,
    pub last_trained_at: Option<Timestamp>,
    /// Gold additions counted when training last finished.
    pub gold_additions_at_training: usize,
}

impl RetrainState {
    pub fn new_gold_since_training(&self, gold_additions: usize) -> usize {
        gold_additions.saturating_sub(self.gold_additions_at_training)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    versions: BTreeMap<String, VersionRecord>,
    rollout: Option<RolloutPolicy>,
    retrain: RetrainState,
}

fn entry(actor: &str, action: GovernanceAction, rationale: &str, at: Timestamp) -> GovernanceEntry {
    GovernanceEntry { actor: actor.to_string(), action, rationale: rationale.to_string(), at }
}

fn prefix(pathway: Pathway) -> &'static str {
    match pathway {
        Pathway::Ft => "ft",
        Pathway::P => "p",
    }
}

impl Registry {
    pub fn get(&self, version_id: &str) -> Option<&VersionRecord> {
        self.versions.get(version_id)
    }

    pub fn versions(&self) -> impl Iterator<Item = &VersionRecord> {
        self.versions.values()
    }

    pub fn rollout(&self) -> Option<&RolloutPolicy> {
        self.rollout.as_ref()
    }

    pub fn retrain(&self) -> &RetrainState {
        &self.retrain
    }

    /// Ids are `ft-N` / `p-N`, numbered per pathway from 1.
    pub fn next_version_id(&self, pathway: Pathway) -> String {
        let n = self.versions.values().filter(|v| v.pathway == pathway).count();
        format!("{}-{}", prefix(pathway), n + 1)
    }

    pub fn deployed(&self, pathway: Pathway) -> Option<&VersionRecord> {
        self.versions.values().find(|v| v.pathway == pathway && v.status == VersionStatus::Deployed)
    }

    pub fn rollout_pathway(&self) -> Option<Pathway> {
        let policy = self.rollout.as_ref()?;
        self.versions.get(&policy.variant_a).map(|v| v.pathway)
    }

    /// Which version serves `key` on `pathway`: the rollout assignment when
    /// a rollout covers the pathway, the deployed version otherwise.
    pub fn serving(&self, pathway: Pathway, key: &str) -> Option<&VersionRecord> {
        if self.rollout_pathway() == Some(pathway) {
            let policy = self.rollout.as_ref()?;
            return self.versions.get(assign_variant(key, policy));
        }
        self.deployed(pathway)
    }

    fn version(&self, version_id: &str) -> Result<&VersionRecord, LifecycleError> {
        self.versions.get(version_id).ok_or_else(|| LifecycleError::UnknownVersion(version_id.to_string()))
    }

    fn in_rollout(&self, version_id: &str) -> bool {
        self.rollout.as_ref().is_some_and(|p| p.variant_a == version_id || p.variant_b == version_id)
    }

    fn require(
        &self,
        version_id: &str,
        allowed: &[VersionStatus],
        action: &'static str,
    ) -> Result<&VersionRecord, LifecycleError> {
        let v = self.version(version_id)?;
        if !allowed.contains(&v.status) {
            return Err(LifecycleError::InvalidTransition { version_id: version_id.to_string(), status: v.status, action });
        }
        Ok(v)
    }

    fn require_report(version_id: &str, report: &EvalReport, split: Split) -> Result<(), LifecycleError> {
        if report.version_id != version_id {
            return Err(LifecycleError::ReportMismatch {
                expected: version_id.to_string(),
                got: report.version_id.clone(),
            });
        }
        if report.split != split {
            return Err(LifecycleError::ReportMismatch {
                expected: split.to_string(),
                got: report.split.to_string(),
            });
        }
        Ok(())
    }

    pub fn apply(&mut self, event: &VersionEvent) -> Result<(), LifecycleError> {
        match event {
            VersionEvent::Created { version_id, payload, snapshot_id, actor, rationale, at } => {
                if self.versions.contains_key(version_id) {
                    return Err(LifecycleError::DuplicateVersion(version_id.clone()));
                }
                if let VersionPayload::Prompt(t) = payload {
                    t.validate()?;
                }
                if let VersionPayload::Model(m) = payload {
                    m.validate()?;
                }
                let record = VersionRecord {
                    version_id: version_id.clone(),
                    pathway: payload.pathway(),
                    payload: payload.clone(),
                    status: VersionStatus::Candidate,
                    eval: None,
                    test_eval: None,
                    gate: None,
                    governance_log: vec![entry(actor, GovernanceAction::Create, rationale, *at)],
                    created_from_snapshot: snapshot_id.clone(),
                    deployed_at: None,
                    review_after: None,
                    monitoring_pending: false,
                };
                self.versions.insert(version_id.clone(), record);
            }
            VersionEvent::Gated { version_id, candidate, incumbent, margin, actor, at } => {
                let v = self.require(version_id, &[VersionStatus::Candidate], "pass the gate")?;
                Self::require_report(version_id, candidate, Split::Validation)?;
                let current = self.deployed(v.pathway).map(|d| d.version_id.clone());
                let incumbent_id = incumbent.as_ref().map(|r| r.version_id.clone());
                if current != incumbent_id {
                    return Err(LifecycleError::ReportMismatch {
                        expected: current.unwrap_or_else(|| "no incumbent".into()),
                        got: incumbent_id.unwrap_or_else(|| "no incumbent".into()),
                    });
                }
                let decision = promotion_gate(candidate, incumbent.as_ref(), *margin)?;
                let gate = GateRecord {
                    decision,
                    snapshot_id: candidate.snapshot_id.clone(),
                    candidate_f1: candidate.f1,
                    incumbent: incumbent_id.clone(),
                    incumbent_f1: incumbent.as_ref().map(|r| r.f1),
                    margin: *margin,
                };
                let rationale = match &gate.incumbent_f1 {
                    Some(f1) => format!("f1 {:.4} vs incumbent {:.4} + margin {margin}", candidate.f1, f1),
                    None => format!("f1 {:.4}, no incumbent", candidate.f1),
                };
                if let (Some(id), Some(report)) = (incumbent_id, incumbent) {
                    self.versions.get_mut(&id).expect("deployed version exists").eval = Some(report.clone());
                }
                let v = self.versions.get_mut(version_id).expect("checked above");
                let action = match decision {
                    GateDecision::Promote => {
                        v.status = VersionStatus::Validated;
                        GovernanceAction::GatePromote
                    }
                    GateDecision::Reject => GovernanceAction::GateReject,
                };
                v.eval = Some(candidate.clone());
                v.gate = Some(gate);
                v.governance_log.push(entry(actor, action, &rationale, *at));
            }
            VersionEvent::Deployed { version_id, test_eval, actor, rationale, at } => {
                if actor.trim().is_empty() || rationale.trim().is_empty() {
                    return Err(LifecycleError::MissingRationale);
                }
                let v = self.require(version_id, &[VersionStatus::Validated], "deploy")?;
                if v.test_eval.is_some() || v.test_reads() > 0 {
                    return Err(LifecycleError::TestAlreadyRead { version_id: version_id.clone() });
                }
                Self::require_report(version_id, test_eval, Split::Test)?;
                let gate = v.gate.as_ref().expect("validated versions carry a gate record");
                if test_eval.snapshot_id != gate.snapshot_id {
                    return Err(LifecycleError::SnapshotMismatch {
                        candidate: test_eval.snapshot_id.clone(),
                        incumbent: gate.snapshot_id.clone(),
                    });
                }
                let pathway = v.pathway;
                let current = self.deployed(pathway).map(|d| d.version_id.clone());
                if gate.incumbent != current {
                    return Err(LifecycleError::StaleGate { version_id: version_id.clone() });
                }
                if self.rollout_pathway() == Some(pathway) {
                    return Err(LifecycleError::RolloutActive(pathway));
                }
                self.supersede(pathway, version_id, actor, *at);
                let v = self.versions.get_mut(version_id).expect("checked above");
                v.test_eval = Some(test_eval.clone());
                v.governance_log.push(entry(
                    actor,
                    GovernanceAction::TestEvaluated,
                    &format!("test f1 {:.4} on {}", test_eval.f1, test_eval.snapshot_id),
                    *at,
                ));
                v.governance_log.push(entry(actor, GovernanceAction::Deploy, rationale, *at));
                v.status = VersionStatus::Deployed;
                v.deployed_at = Some(*at);
            }
            VersionEvent::Hotfixed { version_id, actor, rationale, review_after, at } => {
                if actor.trim().is_empty() || rationale.trim().is_empty() {
                    return Err(LifecycleError::MissingRationale);
                }
                let v = self.require(version_id, &[VersionStatus::Candidate], "hotfix")?;
                if v.pathway != Pathway::P {
                    return Err(LifecycleError::InvalidTransition {
                        version_id: version_id.clone(),
                        status: v.status,
                        action: "hotfix a model version",
                    });
                }
                if review_after < at {
                    return Err(LifecycleError::InvalidPolicy("review_after precedes the hotfix".into()));
                }
                if self.rollout_pathway() == Some(Pathway::P) {
                    return Err(LifecycleError::RolloutActive(Pathway::P));
                }
                self.supersede(Pathway::P, version_id, actor, *at);
                let v = self.versions.get_mut(version_id).expect("checked above");
                v.governance_log.push(entry(actor, GovernanceAction::Hotfix, rationale, *at));
                v.status = VersionStatus::Deployed;
                v.deployed_at = Some(*at);
                v.review_after = Some(*review_after);
                v.monitoring_pending = true;
            }
            VersionEvent::Monitored { version_id, report, actor, at } => {
                let v = self.version(version_id)?;
                if !v.monitoring_pending {
                    return Err(LifecycleError::InvalidTransition {
                        version_id: version_id.clone(),
                        status: v.status,
                        action: "record monitoring without a pending review",
                    });
                }
                Self::require_report(version_id, report, Split::Validation)?;
                let v = self.versions.get_mut(version_id).expect("checked above");
                v.eval = Some(report.clone());
                v.monitoring_pending = false;
                v.governance_log.push(entry(
                    actor,
                    GovernanceAction::MonitoringEvaluated,
                    &format!("validation f1 {:.4} on {}", report.f1, report.snapshot_id),
                    *at,
                ));
            }
            VersionEvent::Retired { version_id, actor, rationale, at } => {
                self.require(
                    version_id,
                    &[VersionStatus::Candidate, VersionStatus::Validated, VersionStatus::Deployed],
                    "retire",
                )?;
                if self.in_rollout(version_id) {
                    let pathway = self.versions[version_id].pathway;
                    return Err(LifecycleError::RolloutActive(pathway));
                }
                let v = self.versions.get_mut(version_id).expect("checked above");
                v.status = VersionStatus::Retired;
                v.governance_log.push(entry(actor, GovernanceAction::Retire, rationale, *at));
            }
            VersionEvent::RetrainQueued { reason, at } => {
                if self.retrain.queued.is_some() {
                    return Err(LifecycleError::RetrainInFlight);
                }
                self.retrain.jobs_started += 1;
                self.retrain.queued =
                    Some(RetrainJob { job_id: self.retrain.jobs_started, reason: reason.clone(), queued_at: *at });
            }
            VersionEvent::RetrainFinished { gold_additions, version_id, at } => {
                if let Some(id) = version_id {
                    self.version(id)?;
                }
                self.retrain.queued = None;
                self.retrain.last_trained_at = Some(*at);
                self.retrain.gold_additions_at_training = *gold_additions;
            }
            VersionEvent::RolloutStarted { policy, actor, rationale } => {
                if let Some(pathway) = self.rollout_pathway() {
                    return Err(LifecycleError::RolloutActive(pathway));
                }
                policy.validate()?;
                let usable = [VersionStatus::Validated, VersionStatus::Deployed];
                let a = self.require(&policy.variant_a, &usable, "join a rollout")?;
                let b = self.require(&policy.variant_b, &usable, "join a rollout")?;
                if a.pathway != b.pathway {
                    return Err(LifecycleError::InvalidPolicy("variants belong to different pathways".into()));
                }
                let note = format!("{rationale} (B = {}, fraction {})", policy.variant_b, policy.fraction_b);
                for id in [&policy.variant_a, &policy.variant_b] {
                    let v = self.versions.get_mut(id).expect("checked above");
                    v.governance_log.push(entry(actor, GovernanceAction::RolloutStart, &note, policy.started_at));
                }
                self.rollout = Some(policy.clone());
            }
            VersionEvent::RolloutUpdated { fraction_b, .. } => {
                let policy = self.rollout.as_ref().ok_or(LifecycleError::NoRollout)?;
                let updated = RolloutPolicy { fraction_b: *fraction_b, ..policy.clone() };
                updated.validate()?;
                self.rollout = Some(updated);
            }
            VersionEvent::RolloutEnded { actor, rationale, at } => {
                let policy = self.rollout.take().ok_or(LifecycleError::NoRollout)?;
                for id in [&policy.variant_a, &policy.variant_b] {
                    if let Some(v) = self.versions.get_mut(id) {
                        v.governance_log.push(entry(actor, GovernanceAction::RolloutEnd, rationale, *at));
                    }
                }
            }
        }
        Ok(())
    }

    fn supersede(&mut self, pathway: Pathway, by: &str, actor: &str, at: Timestamp) {
        let current = self.deployed(pathway).map(|v| v.version_id.clone());
        if let Some(id) = current {
            let v = self.versions.get_mut(&id).expect("deployed version exists");
            v.status = VersionStatus::Retired;
            v.governance_log.push(entry(actor, GovernanceAction::Retire, &format!("superseded by {by}"), at));
        }
    }

    /// Deployed versions of `pathway` in deployment order.
    pub fn deployment_history(&self, pathway: Pathway) -> Vec<&VersionRecord> {
        let mut deployed: Vec<&VersionRecord> =
            self.versions.values().filter(|v| v.pathway == pathway && v.deployed_at.is_some()).collect();
        deployed.sort_by_key(|v| {
            let order = v
                .governance_log
                .iter()
                .position(|e| matches!(e.action, GovernanceAction::Deploy | GovernanceAction::Hotfix));
            (v.deployed_at, order, v.version_id.clone())
        });
        deployed
    }

    /// At most one deployed version per pathway, every deployment logged
    /// with actor and rationale, TEST read at most once per version and
    /// gated deployments carry a validation report.
    pub fn invariants_hold(&self) -> bool {
        let one_deployed =
            [Pathway::Ft, Pathway::P].iter().all(|&p| self.versions.values().filter(|v| v.pathway == p && v.status == VersionStatus::Deployed).count() <= 1);
        let logged = self.versions.values().all(|v| {
            v.governance_log
                .iter()
                .filter(|e| matches!(e.action, GovernanceAction::Deploy | GovernanceAction::Hotfix))
                .all(|e| !e.actor.trim().is_empty() && !e.rationale.trim().is_empty())
        });
        let test_once = self.versions.values().all(|v| v.test_reads() <= 1);
        let evaluated = self
            .versions
            .values()
            .filter(|v| v.deployed_at.is_some())
            .all(|v| v.was_hotfixed() || (v.eval.is_some() && v.test_eval.is_some()));
        one_deployed && logged && test_once && evaluated
    }
}
