//! In-memory state rebuilt by folding log records.
//!
//! [`AppState::apply`] is the only transition function, used both live and
//! on replay. It validates the whole record before touching anything, so a
//! rejected record leaves the state unchanged. It never reads a clock or a
//! random source: every decision was made before the record was written.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use feedloop_core::feedback::{ConflictQueue, FeedbackLog};
use feedloop_core::goldset::{GoldSet, SplitRatios};
use feedloop_core::lifecycle::{Registry, VersionEvent};
use feedloop_core::drift::DriftReport;
use feedloop_core::ingest::MessageStore;
use feedloop_core::{Classification, MessageKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::log::{ConflictOp, GoldOp, LogBody, LogRecord, SCHEMA_VERSION};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AppState {
    pub store: MessageStore,
    /// Latest classification of each message per version.
    pub classifications: BTreeMap<MessageKey, BTreeMap<String, Classification>>,
    /// Versions whose response for the message could not be parsed.
    pub unparsed: BTreeMap<MessageKey, BTreeSet<String>>,
    pub feedback: FeedbackLog,
    pub conflicts: ConflictQueue,
    pub gold: GoldSet,
    pub registry: Registry,
    pub drift_reports: Vec<DriftReport>,
    pub latest_snapshot: Option<String>,
    pub last_seq: Option<u64>,
}

fn violation(seq: u64, reason: impl Into<String>) -> ServiceError {
    ServiceError::SchemaViolation { seq, reason: reason.into() }
}

fn is_rollout_event(event: &VersionEvent) -> bool {
    matches!(
        event,
        VersionEvent::RolloutStarted { .. } | VersionEvent::RolloutUpdated { .. } | VersionEvent::RolloutEnded { .. }
    )
}

impl AppState {
    pub fn new(ratios: SplitRatios) -> Result<Self, ServiceError> {
        Ok(AppState { gold: GoldSet::new(ratios)?, ..Default::default() })
    }

    pub fn next_seq(&self) -> u64 {
        self.last_seq.map_or(0, |s| s + 1)
    }

    /// Folds `records` into a fresh state.
    pub fn replay<'a>(
        ratios: SplitRatios,
        records: impl IntoIterator<Item = &'a LogRecord>,
    ) -> Result<Self, ServiceError> {
        let mut state = AppState::new(ratios)?;
        for record in records {
            state.apply(record)?;
        }
        Ok(state)
    }

    /// sha256 over the canonical JSON of the whole state.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("state serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn apply(&mut self, record: &LogRecord) -> Result<(), ServiceError> {
        let seq = record.seq;
        if seq != self.next_seq() {
            return Err(crate::log::LogError::GapDetected { expected: self.next_seq(), found: seq }.into());
        }
        if record.schema_version != SCHEMA_VERSION {
            return Err(violation(seq, format!("schema version {}", record.schema_version)));
        }
        match &record.body {
            LogBody::Ingest { channel_id, messages, .. } => {
                if messages.iter().any(|m| &m.channel_id != channel_id) {
                    return Err(violation(seq, "message from another channel"));
                }
                if self.store.new_messages(messages).len() != messages.len() {
                    return Err(violation(seq, "ingest record repeats a stored message"));
                }
                self.store.ingest(messages.clone());
            }
            LogBody::Classification { version_id, classifications, unparseable } => {
                if self.registry.get(version_id).is_none() {
                    return Err(violation(seq, format!("unknown version {version_id}")));
                }
                for c in classifications {
                    if &c.version_id != version_id || !c.is_valid() {
                        return Err(violation(seq, format!("bad classification for {}", c.key())));
                    }
                    if !self.store.contains(&c.key()) {
                        return Err(ServiceError::UnknownMessage(c.key()));
                    }
                }
                if let Some(key) = unparseable.iter().find(|k| !self.store.contains(k)) {
                    return Err(ServiceError::UnknownMessage(key.clone()));
                }
                for c in classifications {
                    let key = c.key();
                    if let Some(failed) = self.unparsed.get_mut(&key) {
                        failed.remove(version_id);
                        if failed.is_empty() {
                            self.unparsed.remove(&key);
                        }
                    }
                    self.classifications.entry(key).or_default().insert(version_id.clone(), c.clone());
                }
                for key in unparseable {
                    self.unparsed.entry(key.clone()).or_default().insert(version_id.clone());
                }
            }
            LogBody::Feedback { events } => {
                let next = self.feedback.next_event_id();
                for (i, e) in events.iter().enumerate() {
                    if e.event_id != next + i as u64 {
                        return Err(violation(seq, "feedback event ids are not dense"));
                    }
                    if !self.store.contains(&e.key()) {
                        return Err(ServiceError::UnknownMessage(e.key()));
                    }
                    e.validate()?;
                }
                for e in events {
                    self.feedback.record_event(e.clone(), &self.store)?;
                }
            }
            LogBody::Gold(GoldOp::Add { example }) => {
                self.gold.add_gold(example.clone(), &self.conflicts)?;
            }
            LogBody::Gold(GoldOp::Snapshot { snapshot_id }) => {
                let preview = self.gold.preview_snapshot();
                if &preview.snapshot_id != snapshot_id {
                    return Err(violation(seq, format!("snapshot {snapshot_id} does not match content")));
                }
                self.gold.snapshot();
                self.latest_snapshot = Some(snapshot_id.clone());
            }
            LogBody::Conflict(op) => match op {
                ConflictOp::Open { key, positions } => {
                    if !self.store.contains(key) {
                        return Err(ServiceError::UnknownMessage(key.clone()));
                    }
                    self.conflicts.open(key.clone(), positions.clone(), record.at)?;
                }
                ConflictOp::Update { conflict_id, positions } => {
                    self.conflicts.update_positions(*conflict_id, positions.clone())?;
                }
                ConflictOp::Resolve { conflict_id, label, resolver_id } => {
                    if resolver_id.trim().is_empty() {
                        return Err(violation(seq, "empty resolver id"));
                    }
                    self.conflicts.resolve(*conflict_id, *label, resolver_id, record.at)?;
                }
                ConflictOp::Withdraw { conflict_id } => {
                    self.conflicts.withdraw(*conflict_id, record.at)?;
                }
            },
            LogBody::Drift { report } => {
                if !report.is_consistent() {
                    return Err(violation(seq, "inconsistent drift report"));
                }
                self.drift_reports.push(report.clone());
            }
            LogBody::Version { event } => {
                if is_rollout_event(event) {
                    return Err(violation(seq, "rollout events belong in ROLLOUT records"));
                }
                self.registry.apply(event)?;
            }
            LogBody::Rollout { event } => {
                if !is_rollout_event(event) {
                    return Err(violation(seq, "ROLLOUT records carry rollout events only"));
                }
                self.registry.apply(event)?;
            }
        }
        self.last_seq = Some(seq);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub digest: String,
    pub state: AppState,
}

impl Checkpoint {
    pub fn write(path: &Path, state: &AppState) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        #[derive(Serialize)]
        struct Borrowed<'a> {
            digest: String,
            state: &'a AppState,
        }
        let body = serde_json::to_vec(&Borrowed { digest: state.digest(), state })?;
        std::fs::write(&tmp, body)?;
        std::fs::rename(tmp, path)
    }

    /// A checkpoint whose digest does not match its state is ignored.
    pub fn read(path: &Path) -> Option<AppState> {
        let bytes = std::fs::read(path).ok()?;
        let cp: Checkpoint = serde_json::from_slice(&bytes).ok()?;
        (cp.state.digest() == cp.digest).then_some(cp.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use feedloop_core::goldset::{GoldExample, Provenance};
    use feedloop_core::{Label, Message, Timestamp};

    fn ingest(seq: u64, ids: &[u64]) -> LogRecord {
        let messages = ids.iter().map(|&i| Message::new("c", i, Timestamp(i as i64), "text")).collect();
        LogRecord::new(
            seq,
            Timestamp(0),
            LogBody::Ingest { channel_id: "c".into(), messages, skipped: 0, duplicates: 0 },
        )
    }

    #[test]
    fn empty_state_digest_is_fixed() {
        let a = AppState::new(SplitRatios::default()).unwrap();
        let b = AppState::replay(SplitRatios::default(), &[]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn rejected_records_change_nothing() {
        let mut state = AppState::new(SplitRatios::default()).unwrap();
        state.apply(&ingest(0, &[1, 2])).unwrap();
        let before = state.digest();
        assert!(matches!(state.apply(&ingest(1, &[3, 2])), Err(ServiceError::SchemaViolation { seq: 1, .. })));
        assert!(matches!(state.apply(&ingest(5, &[9])), Err(ServiceError::Log(_))));
        let conflict = LogRecord::new(
            1,
            Timestamp(0),
            LogBody::Conflict(ConflictOp::Open {
                key: MessageKey::new("c", 1),
                positions: [("a".to_string(), Label::Ct), ("b".to_string(), Label::Ct)].into(),
            }),
        );
        assert!(state.apply(&conflict).is_err());
        assert_eq!(state.digest(), before);
        state.apply(&ingest(1, &[3])).unwrap();
        assert_eq!(state.store.len(), 3);
    }

    #[test]
    fn snapshot_ids_are_checked() {
        let mut state = AppState::new(SplitRatios::default()).unwrap();
        let g = GoldExample::new(&MessageKey::new("c", 1), "t", Label::Ct, Provenance::Explicit, Timestamp(0), &SplitRatios::default());
        state.apply(&LogRecord::new(0, Timestamp(0), LogBody::Gold(GoldOp::Add { example: g }))).unwrap();
        let bad = LogRecord::new(1, Timestamp(0), LogBody::Gold(GoldOp::Snapshot { snapshot_id: "nope".into() }));
        assert!(state.apply(&bad).is_err());
        let id = state.gold.preview_snapshot().snapshot_id;
        state.apply(&LogRecord::new(1, Timestamp(0), LogBody::Gold(GoldOp::Snapshot { snapshot_id: id.clone() }))).unwrap();
        assert_eq!(state.latest_snapshot, Some(id));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cp.json");
        let mut state = AppState::new(SplitRatios::default()).unwrap();
        state.apply(&ingest(0, &[1, 2, 3])).unwrap();
        Checkpoint::write(&path, &state).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap().digest(), state.digest());
        std::fs::write(&path, b"{}").unwrap();
        assert!(Checkpoint::read(&path).is_none());
    }
}
