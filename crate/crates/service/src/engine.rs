//! Operations over the event-sourced state.
//!
//! Every mutation is a log record: the engine decides, builds the record,
//! applies it to the in-memory state through [`AppState::apply`] and
//! appends it to the log before answering. Writers are serialized by the
//! state lock; readers share it. Expensive work (training, evaluation) runs
//! against a cloned snapshot outside the lock where the outcome does not
//! depend on interleaving.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, PoisonError, RwLock};

use feedloop_core::classify::{
    classify_p, train_reference, triage, ClassifyError, CompletionClient, PromptTemplate, SelectionStrategy, Triage,
};
use feedloop_core::drift::{check_drift, DriftReport};
use feedloop_core::feedback::{
    aggregate_stances, sample_rating_task, stance_from_events, ConflictStatus, ExplicitKind, FeedbackEvent,
    FeedbackKind, GoldProposal, ImplicitKind, Stance,
};
use feedloop_core::goldset::{DatasetSnapshot, GoldExample, Provenance, SnapshotCounts, Split};
use feedloop_core::ingest::{parse_export, FeedQuery};
use feedloop_core::lifecycle::{
    evaluate, fewshot_experiment, retrain_trigger, schedule_due, EvalReport, ExperimentReport, ExperimentSpec,
    GateDecision, GateRecord, GovernanceEntry, KeyBasis, LifecycleError, RolloutPolicy, VersionEvent,
    VersionPayload, VersionRecord, VersionStatus,
};
use feedloop_core::{Classification, Label, Message, MessageKey, Pathway, Timestamp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::ServiceError;
use crate::log::{ConflictOp, EventLog, GoldOp, LogBody, LogRecord};
use crate::state::{AppState, Checkpoint};

/// Records per CLASSIFICATION record when backfilling.
const BACKFILL_CHUNK: usize = 5_000;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Settable clock for tests and simulations.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock(AtomicI64::new(start.0))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(Ordering::SeqCst))
    }
}

/// Salted hash of a raw user identity; raw ids never reach the log.
pub fn pseudonymize(salt: &str, raw: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(raw.as_bytes());
    format!("u-{}", &hex::encode(h.finalize())[..16])
}

pub fn checkpoint_path(log_path: &Path) -> PathBuf {
    let mut name = log_path.as_os_str().to_owned();
    name.push(".checkpoint");
    PathBuf::from(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackAction {
    Agree,
    Disagree,
    Relabel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackInput {
    pub user_id: String,
    pub channel_id: String,
    pub message_id: u64,
    pub kind: FeedbackAction,
    /// Required for RELABEL.
    #[serde(default)]
    pub label: Option<Label>,
    /// Version whose classification was on screen; defaults to the one the
    /// feed serves to this user.
    #[serde(default)]
    pub displayed_version: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ImplicitAction {
    Impression,
    ScrollPast,
    Click,
    Dwell,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImplicitInput {
    pub user_id: String,
    pub channel_id: String,
    pub message_id: u64,
    pub kind: ImplicitAction,
    #[serde(default)]
    pub dwell_seconds: Option<f64>,
    #[serde(default)]
    pub displayed_version: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IngestOutcome {
    pub accepted: usize,
    pub duplicates: usize,
    pub skipped: usize,
    pub classified: usize,
    pub unparseable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeedbackOutcome {
    pub event_ids: Vec<u64>,
    pub proposals: BTreeMap<MessageKey, GoldProposal>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeedItem {
    pub message: Message,
    pub classification: Option<Classification>,
    pub triage: Option<Triage>,
    pub gold_label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeedResponse {
    pub total: usize,
    pub page: u32,
    pub page_size: u32,
    pub items: Vec<FeedItem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewReason {
    LowConfidence,
    Unparseable,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReviewItem {
    pub message: Message,
    pub classification: Option<Classification>,
    pub reason: ReviewReason,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatingTaskRequest {
    pub n: usize,
    pub from: Timestamp,
    pub to: Timestamp,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnapshotInfo {
    pub snapshot_id: String,
    pub size: usize,
    pub counts: SnapshotCounts,
    pub monitored: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftOutcome {
    pub report: DriftReport,
    pub retrain_queued: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainRequest {
    #[serde(default)]
    pub snapshot_id: Option<String>,
    #[serde(default)]
    pub actor: Option<String>,
    #[serde(default)]
    pub rationale: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub version_id: String,
    pub snapshot_id: String,
    pub train_examples: usize,
    pub retrain_job: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromoteRequest {
    #[serde(default)]
    pub snapshot_id: Option<String>,
    pub actor: String,
    pub rationale: String,
    /// Off: stop after the gate, leaving the version VALIDATED.
    #[serde(default = "yes")]
    pub deploy: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromoteOutcome {
    pub version_id: String,
    pub gate: GateRecord,
    pub candidate: EvalReport,
    pub incumbent: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub deployed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptMode {
    Gated,
    Hotfix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptChange {
    pub template: PromptTemplate,
    pub mode: PromptMode,
    pub actor: String,
    pub rationale: String,
    #[serde(default)]
    pub snapshot_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptOutcome {
    pub version_id: String,
    pub promotion: Option<PromoteOutcome>,
    pub review_after: Option<Timestamp>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutRequest {
    /// Defaults to the deployed version of B's pathway.
    #[serde(default)]
    pub variant_a: Option<String>,
    pub variant_b: String,
    pub fraction_b: f64,
    #[serde(default = "default_basis")]
    pub key_basis: KeyBasis,
    #[serde(default)]
    pub review_days: Option<u32>,
    pub actor: String,
    pub rationale: String,
}

fn default_basis() -> KeyBasis {
    KeyBasis::Message
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentRequest {
    pub k_values: Vec<usize>,
    pub strategies: Vec<SelectionStrategy>,
    pub seed: u64,
    pub template_text: String,
    #[serde(default)]
    pub snapshot_id: Option<String>,
}

/// A version without its payload weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VersionSummary {
    pub version_id: String,
    pub pathway: Pathway,
    pub status: VersionStatus,
    pub created_from_snapshot: String,
    pub template: Option<PromptTemplate>,
    pub eval: Option<EvalReport>,
    pub test_eval: Option<EvalReport>,
    pub gate: Option<GateRecord>,
    pub deployed_at: Option<Timestamp>,
    pub review_after: Option<Timestamp>,
    pub monitoring_pending: bool,
    pub monitoring_overdue: bool,
    pub governance_log: Vec<GovernanceEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FeedbackCounts {
    pub explicit: usize,
    pub implicit: usize,
    pub users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub messages: usize,
    pub classified: usize,
    pub unparseable: usize,
    pub feedback: FeedbackCounts,
    pub gold_live: usize,
    pub gold_additions: usize,
    pub latest_snapshot: Option<SnapshotInfo>,
    pub conflicts_open: usize,
    pub conflicts_total: usize,
    pub deployed: BTreeMap<Pathway, String>,
    pub rollout: Option<RolloutPolicy>,
    pub retrain: feedloop_core::lifecycle::RetrainState,
    pub eval_reports: Vec<EvalReport>,
    pub drift_history: Vec<DriftReport>,
    pub last_seq: Option<u64>,
}

struct Inner {
    state: AppState,
    log: EventLog,
    poisoned: bool,
}

pub struct Engine {
    inner: RwLock<Inner>,
    config: Config,
    clock: Arc<dyn Clock>,
    client: Option<Arc<dyn CompletionClient>>,
}

/// Write access: the state plus the ability to commit records.
pub struct Tx<'a> {
    engine: &'a Engine,
    inner: &'a mut Inner,
}

impl Tx<'_> {
    pub fn state(&self) -> &AppState {
        &self.inner.state
    }

    pub fn commit(&mut self, body: LogBody) -> Result<u64, ServiceError> {
        if self.inner.poisoned {
            return Err(ServiceError::StorageFailure("log unavailable after a failed recovery; restart".into()));
        }
        let record = LogRecord::new(self.inner.state.next_seq(), self.engine.clock.now(), body);
        self.inner.state.apply(&record)?;
        if let Err(e) = self.inner.log.append(&record) {
            tracing::error!(seq = record.seq, error = %e, "append failed, rebuilding state from the log");
            self.engine.recover(self.inner);
            return Err(ServiceError::StorageFailure(e.to_string()));
        }
        if let (Some(every), Some(path)) = (self.engine.config.storage.checkpoint_every, self.inner.log.path()) {
            if (record.seq + 1).is_multiple_of(every) {
                let cp = checkpoint_path(path);
                let synced = self.inner.log.sync();
                if let Err(e) = synced.map_err(|e| e.to_string()).and_then(|_| {
                    Checkpoint::write(&cp, &self.inner.state).map_err(|e| e.to_string())
                }) {
                    tracing::warn!(error = %e, "checkpoint not written");
                }
            }
        }
        Ok(record.seq)
    }
}

fn other(p: Pathway) -> Pathway {
    match p {
        Pathway::Ft => Pathway::P,
        Pathway::P => Pathway::Ft,
    }
}

fn summarize(v: &VersionRecord, now: Timestamp) -> VersionSummary {
    VersionSummary {
        version_id: v.version_id.clone(),
        pathway: v.pathway,
        status: v.status,
        created_from_snapshot: v.created_from_snapshot.clone(),
        template: match &v.payload {
            VersionPayload::Prompt(t) => Some(t.clone()),
            VersionPayload::Model(_) => None,
        },
        eval: v.eval.clone(),
        test_eval: v.test_eval.clone(),
        gate: v.gate.clone(),
        deployed_at: v.deployed_at,
        review_after: v.review_after,
        monitoring_pending: v.monitoring_pending,
        monitoring_overdue: v.monitoring_overdue(now),
        governance_log: v.governance_log.clone(),
    }
}

/// Whether aggregated gold should replace the live example. Implicit
/// evidence only ever replaces implicit gold; explicit consensus replaces
/// anything with a different label and upgrades implicit gold.
fn should_replace(live: Option<&GoldExample>, label: Label, provenance: &Provenance) -> bool {
    let Some(live) = live else { return true };
    match (provenance, &live.provenance) {
        (Provenance::Implicit, Provenance::Implicit) => live.label != label,
        (Provenance::Implicit, _) => false,
        (_, Provenance::Implicit) => true,
        _ => live.label != label,
    }
}

impl Engine {
    /// Opens the configured log (or an in-memory one) and replays it.
    pub fn open(
        config: Config,
        clock: Arc<dyn Clock>,
        client: Option<Arc<dyn CompletionClient>>,
    ) -> Result<Self, ServiceError> {
        config.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let ratios = config.lifecycle.split_ratios;
        let (log, state) = match &config.storage.log_path {
            None => (EventLog::memory(), AppState::new(ratios)?),
            Some(path) => {
                let (log, records) = EventLog::open(path, config.storage.fsync_every)?;
                let mut state = Checkpoint::read(&checkpoint_path(path))
                    .filter(|s| s.next_seq() <= records.len() as u64)
                    .unwrap_or(AppState::new(ratios)?);
                let start = state.next_seq() as usize;
                if start > 0 {
                    tracing::info!(seq = start, "resuming from checkpoint");
                }
                for record in &records[start..] {
                    state.apply(record)?;
                }
                (log, state)
            }
        };
        tracing::info!(records = log.next_seq(), "replay complete");
        Ok(Self::from_parts(config, clock, client, log, state))
    }

    /// Engine over an explicit log; the state is the log's replay.
    pub fn with_log(
        config: Config,
        clock: Arc<dyn Clock>,
        client: Option<Arc<dyn CompletionClient>>,
        log: EventLog,
    ) -> Result<Self, ServiceError> {
        let state = AppState::replay(config.lifecycle.split_ratios, &log.records()?)?;
        Ok(Self::from_parts(config, clock, client, log, state))
    }

    fn from_parts(
        config: Config,
        clock: Arc<dyn Clock>,
        client: Option<Arc<dyn CompletionClient>>,
        log: EventLog,
        state: AppState,
    ) -> Self {
        Engine { inner: RwLock::new(Inner { state, log, poisoned: false }), config, clock, client }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn client(&self) -> Option<&dyn CompletionClient> {
        self.client.as_deref()
    }

    pub fn read<R>(&self, f: impl FnOnce(&AppState) -> R) -> R {
        let guard = self.inner.read().unwrap_or_else(PoisonError::into_inner);
        f(&guard.state)
    }

    pub fn write<R>(&self, f: impl FnOnce(&mut Tx<'_>) -> Result<R, ServiceError>) -> Result<R, ServiceError> {
        let mut guard = self.inner.write().unwrap_or_else(PoisonError::into_inner);
        let mut tx = Tx { engine: self, inner: &mut guard };
        f(&mut tx)
    }

    fn recover(&self, inner: &mut Inner) {
        let rebuilt = match inner.log.path().map(Path::to_path_buf) {
            Some(path) => EventLog::open(&path, self.config.storage.fsync_every)
                .map_err(ServiceError::from)
                .and_then(|(log, records)| {
                    Ok((log, AppState::replay(self.config.lifecycle.split_ratios, &records)?))
                })
                .map(|(log, state)| {
                    inner.log = log;
                    state
                }),
            None => inner
                .log
                .records()
                .map_err(ServiceError::from)
                .and_then(|records| AppState::replay(self.config.lifecycle.split_ratios, &records)),
        };
        match rebuilt {
            Ok(state) => inner.state = state,
            Err(e) => {
                tracing::error!(error = %e, "recovery failed; refusing further writes");
                inner.poisoned = true;
            }
        }
    }

    pub fn digest(&self) -> String {
        self.read(AppState::digest)
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.read(|s| s.last_seq)
    }

    /// Every record written so far.
    pub fn records(&self) -> Result<Vec<LogRecord>, ServiceError> {
        let guard = self.inner.read().unwrap_or_else(PoisonError::into_inner);
        Ok(guard.log.records()?)
    }

    pub fn sync(&self) -> Result<(), ServiceError> {
        let mut guard = self.inner.write().unwrap_or_else(PoisonError::into_inner);
        Ok(guard.log.sync()?)
    }

    pub fn pseudonym(&self, raw: &str) -> String {
        pseudonymize(&self.config.privacy.user_salt, raw)
    }

    // ---- classification -------------------------------------------------

    /// Versions whose classifications are kept current: deployed versions
    /// and both rollout arms.
    fn active_versions(state: &AppState) -> Vec<String> {
        let mut ids: BTreeSet<String> =
            state.registry.versions().filter(|v| v.status == VersionStatus::Deployed).map(|v| v.version_id.clone()).collect();
        if let Some(p) = state.registry.rollout() {
            ids.insert(p.variant_a.clone());
            ids.insert(p.variant_b.clone());
        }
        ids.into_iter().collect()
    }

    /// Classifies `messages` with `version`; `None` when there is nothing
    /// to record (no classifiable message, or a prompt version without a
    /// client).
    fn classify_with(&self, state: &AppState, version: &VersionRecord, messages: &[&Message]) -> Option<LogBody> {
        let messages: Vec<&Message> = messages.iter().copied().filter(|m| m.is_classifiable()).collect();
        if messages.is_empty() {
            return None;
        }
        let now = self.clock.now();
        let exec = self.config.lifecycle.exec;
        let outcomes: Vec<Result<Classification, ClassifyError>> = match &version.payload {
            VersionPayload::Model(artifact) => exec.map(&messages, |m| {
                let p = artifact.predict(&m.text);
                Ok(Classification {
                    channel_id: m.channel_id.clone(),
                    message_id: m.message_id,
                    label: p.label,
                    confidence: p.confidence,
                    pathway: Pathway::Ft,
                    version_id: version.version_id.clone(),
                    classified_at: now,
                })
            }),
            VersionPayload::Prompt(template) => {
                let Some(client) = self.client.as_deref() else {
                    tracing::warn!(version = %version.version_id, "prompt version active but no completion client configured");
                    return None;
                };
                let pool: Vec<GoldExample> =
                    state.gold.live_examples().filter(|g| g.split == Split::Train).cloned().collect();
                exec.map(&messages, |m| classify_p(m, &version.version_id, template, &pool, client, now))
            }
        };
        let mut classifications = Vec::new();
        let mut unparseable = Vec::new();
        for (m, outcome) in messages.iter().zip(outcomes) {
            match outcome {
                Ok(c) => classifications.push(c),
                Err(e) => {
                    tracing::debug!(key = %m.key(), error = %e, "no label");
                    unparseable.push(m.key());
                }
            }
        }
        Some(LogBody::Classification { version_id: version.version_id.clone(), classifications, unparseable })
    }

    /// Classifies the messages with every active version; returns
    /// (classified, unparseable) counts.
    fn classify_new(&self, tx: &mut Tx<'_>, keys: &[MessageKey]) -> Result<(usize, usize), ServiceError> {
        let mut counts = (0, 0);
        for version_id in Self::active_versions(tx.state()) {
            let body = {
                let state = tx.state();
                let version = state.registry.get(&version_id).expect("active versions exist");
                let messages: Vec<&Message> = keys.iter().filter_map(|k| state.store.get(k)).collect();
                self.classify_with(state, version, &messages)
            };
            if let Some(body) = body {
                if let LogBody::Classification { classifications, unparseable, .. } = &body {
                    counts.0 += classifications.len();
                    counts.1 += unparseable.len();
                }
                tx.commit(body)?;
            }
        }
        Ok(counts)
    }

    /// Classifies every stored message `version_id` has not labeled yet.
    fn backfill(&self, tx: &mut Tx<'_>, version_id: &str) -> Result<usize, ServiceError> {
        let pending: Vec<MessageKey> = {
            let state = tx.state();
            state
                .store
                .iter()
                .filter(|m| m.is_classifiable())
                .map(Message::key)
                .filter(|k| !state.classifications.get(k).is_some_and(|c| c.contains_key(version_id)))
                .filter(|k| !state.unparsed.get(k).is_some_and(|v| v.contains(version_id)))
                .collect()
        };
        let mut done = 0;
        for chunk in pending.chunks(BACKFILL_CHUNK) {
            let body = {
                let state = tx.state();
                let version = state.registry.get(version_id).ok_or_else(|| {
                    ServiceError::Lifecycle(LifecycleError::UnknownVersion(version_id.to_string()))
                })?;
                let messages: Vec<&Message> = chunk.iter().filter_map(|k| state.store.get(k)).collect();
                self.classify_with(state, version, &messages)
            };
            match body {
                Some(body) => {
                    tx.commit(body)?;
                    done += chunk.len();
                }
                None => break,
            }
        }
        Ok(done)
    }

    /// The classification the feed shows for `key` to `user` (pseudonym).
    pub fn displayed_for<'s>(&self, state: &'s AppState, key: &MessageKey, user: Option<&str>) -> Option<&'s Classification> {
        let serving = self.config.lifecycle.serving_pathway;
        for pathway in [serving, other(serving)] {
            let version = match state.registry.rollout() {
                Some(policy) if state.registry.rollout_pathway() == Some(pathway) => {
                    let basis = match (policy.key_basis, user) {
                        (KeyBasis::Message, _) => Some(key.to_string()),
                        (KeyBasis::User, Some(u)) => Some(u.to_string()),
                        (KeyBasis::User, None) => None,
                    };
                    Some(match basis {
                        Some(b) => feedloop_core::lifecycle::assign_variant(&b, policy).to_string(),
                        None => policy.variant_a.clone(),
                    })
                }
                _ => state.registry.deployed(pathway).map(|v| v.version_id.clone()),
            };
            if let Some(v) = version {
                return state.classifications.get(key).and_then(|m| m.get(&v));
            }
        }
        None
    }

    // ---- ingest & feed --------------------------------------------------

    pub fn ingest_export(&self, channel_id: &str, raw: &[u8]) -> Result<IngestOutcome, ServiceError> {
        if channel_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("channel id is empty".into()));
        }
        let parsed = parse_export(raw, channel_id)?;
        self.ingest_messages(channel_id, parsed.messages, parsed.skipped)
    }

    pub fn ingest_messages(
        &self,
        channel_id: &str,
        messages: Vec<Message>,
        skipped: usize,
    ) -> Result<IngestOutcome, ServiceError> {
        if let Some(m) = messages.iter().find(|m| m.channel_id != channel_id) {
            return Err(ServiceError::BadRequest(format!("message {} is not from channel {channel_id}", m.key())));
        }
        self.write(|tx| {
            let fresh = tx.state().store.new_messages(&messages);
            let duplicates = messages.len() - fresh.len();
            let keys: Vec<MessageKey> = fresh.iter().map(Message::key).collect();
            tx.commit(LogBody::Ingest { channel_id: channel_id.to_string(), messages: fresh, skipped, duplicates })?;
            let (classified, unparseable) = self.classify_new(tx, &keys)?;
            Ok(IngestOutcome { accepted: keys.len(), duplicates, skipped, classified, unparseable })
        })
    }

    fn feed_item(&self, state: &AppState, m: &Message, user: Option<&str>) -> FeedItem {
        let classification = self.displayed_for(state, &m.key(), user).cloned();
        let triage = classification.as_ref().and_then(|c| triage(c.confidence, self.config.lifecycle.review_threshold).ok());
        FeedItem {
            message: m.clone(),
            classification,
            triage,
            gold_label: state.gold.live(&m.key()).map(|g| g.label),
        }
    }

    /// `user` is the raw user id; the rollout arm is chosen by its pseudonym.
    pub fn feed(&self, query: &FeedQuery, user: Option<&str>) -> Result<FeedResponse, ServiceError> {
        let user = user.map(|u| self.pseudonym(u));
        self.read(|state| {
            let page = state.store.search(query)?;
            Ok(FeedResponse {
                total: page.total,
                page: query.page,
                page_size: query.page_size,
                items: page.items.iter().map(|m| self.feed_item(state, m, user.as_deref())).collect(),
            })
        })
    }

    pub fn review_queue(&self, limit: usize) -> Vec<ReviewItem> {
        self.read(|state| {
            let mut items: Vec<(f64, ReviewItem)> = state
                .store
                .iter()
                .filter(|m| m.is_classifiable() && state.gold.live(&m.key()).is_none())
                .filter_map(|m| {
                    let key = m.key();
                    match self.displayed_for(state, &key, None) {
                        Some(c) => (triage(c.confidence, self.config.lifecycle.review_threshold).ok()?
                            == Triage::ReviewQueue)
                            .then(|| {
                                let item = ReviewItem {
                                    message: m.clone(),
                                    classification: Some(c.clone()),
                                    reason: ReviewReason::LowConfidence,
                                };
                                (c.confidence, item)
                            }),
                        None => state.unparsed.contains_key(&key).then(|| {
                            (0.0, ReviewItem { message: m.clone(), classification: None, reason: ReviewReason::Unparseable })
                        }),
                    }
                })
                .collect();
            items.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.message.key().cmp(&b.1.message.key())));
            items.into_iter().take(limit).map(|(_, item)| item).collect()
        })
    }

    /// Seeded sample for a rating view; read-only.
    pub fn rating_task(&self, req: &RatingTaskRequest, user: Option<&str>) -> Result<Vec<FeedItem>, ServiceError> {
        if req.from > req.to {
            return Err(ServiceError::BadRequest("time range is inverted".into()));
        }
        let user = user.map(|u| self.pseudonym(u));
        self.read(|state| {
            let sample = sample_rating_task(state.store.iter(), req.from, req.to, req.n, req.seed)?;
            Ok(sample.iter().map(|m| self.feed_item(state, m, user.as_deref())).collect())
        })
    }

    // ---- feedback -------------------------------------------------------

    fn displayed(
        &self,
        state: &AppState,
        key: &MessageKey,
        version: Option<&str>,
        user: &str,
    ) -> Result<Classification, ServiceError> {
        if !state.store.contains(key) {
            return Err(ServiceError::UnknownMessage(key.clone()));
        }
        let found = match version {
            Some(v) => state.classifications.get(key).and_then(|m| m.get(v)),
            None => self.displayed_for(state, key, Some(user)),
        };
        found.cloned().ok_or_else(|| ServiceError::NotClassified {
            key: key.clone(),
            version: version.unwrap_or("the serving version").to_string(),
        })
    }

    pub fn record_feedback(&self, input: &FeedbackInput) -> Result<FeedbackOutcome, ServiceError> {
        let kind = match (input.kind, input.label) {
            (FeedbackAction::Agree, _) => ExplicitKind::Agree,
            (FeedbackAction::Disagree, _) => ExplicitKind::Disagree,
            (FeedbackAction::Relabel, Some(l)) => ExplicitKind::Relabel(l),
            (FeedbackAction::Relabel, None) => return Err(ServiceError::BadRequest("RELABEL needs a label".into())),
        };
        if input.user_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("user_id is empty".into()));
        }
        let user = self.pseudonym(&input.user_id);
        let key = MessageKey::new(input.channel_id.clone(), input.message_id);
        self.write(|tx| {
            let displayed = self.displayed(tx.state(), &key, input.displayed_version.as_deref(), &user)?;
            let event = FeedbackEvent {
                event_id: tx.state().feedback.next_event_id(),
                user_id: user.clone(),
                channel_id: key.channel_id.clone(),
                message_id: key.message_id,
                kind: FeedbackKind::Explicit(kind),
                displayed,
                at: self.clock.now(),
            };
            let id = event.event_id;
            tx.commit(LogBody::Feedback { events: vec![event] })?;
            let proposal = self.reconcile(tx, &key)?;
            Ok(FeedbackOutcome { event_ids: vec![id], proposals: [(key.clone(), proposal)].into() })
        })
    }

    pub fn record_implicit(&self, inputs: &[ImplicitInput]) -> Result<FeedbackOutcome, ServiceError> {
        if !self.config.privacy.implicit_tracking {
            return Err(ServiceError::ImplicitTrackingDisabled);
        }
        if inputs.is_empty() {
            return Ok(FeedbackOutcome { event_ids: vec![], proposals: BTreeMap::new() });
        }
        self.write(|tx| {
            let now = self.clock.now();
            let mut events = Vec::with_capacity(inputs.len());
            let first = tx.state().feedback.next_event_id();
            for (i, input) in inputs.iter().enumerate() {
                if input.user_id.trim().is_empty() {
                    return Err(ServiceError::BadRequest("user_id is empty".into()));
                }
                let kind = match input.kind {
                    ImplicitAction::Impression => ImplicitKind::Impression,
                    ImplicitAction::ScrollPast => ImplicitKind::ScrollPast,
                    ImplicitAction::Click => ImplicitKind::Click,
                    ImplicitAction::Dwell => ImplicitKind::Dwell(input.dwell_seconds.ok_or_else(|| {
                        ServiceError::BadRequest("DWELL needs dwell_seconds".into())
                    })?),
                };
                let user = self.pseudonym(&input.user_id);
                let key = MessageKey::new(input.channel_id.clone(), input.message_id);
                let displayed = self.displayed(tx.state(), &key, input.displayed_version.as_deref(), &user)?;
                events.push(FeedbackEvent {
                    event_id: first + i as u64,
                    user_id: user,
                    channel_id: key.channel_id,
                    message_id: key.message_id,
                    kind: FeedbackKind::Implicit(kind),
                    displayed,
                    at: now,
                });
            }
            let keys: BTreeSet<MessageKey> = events.iter().map(FeedbackEvent::key).collect();
            let event_ids = events.iter().map(|e| e.event_id).collect();
            tx.commit(LogBody::Feedback { events })?;
            let mut proposals = BTreeMap::new();
            for key in keys {
                let proposal = self.reconcile(tx, &key)?;
                proposals.insert(key, proposal);
            }
            Ok(FeedbackOutcome { event_ids, proposals })
        })
    }

    /// Aggregates the message's feedback and records the consequences:
    /// conflicts opened, updated or withdrawn, and gold added.
    fn reconcile(&self, tx: &mut Tx<'_>, key: &MessageKey) -> Result<GoldProposal, ServiceError> {
        let now = self.clock.now();
        let cutoff = self.config.privacy.implicit_retention_days.map(|d| now.plus_days(-i64::from(d)));
        let proposal = {
            let state = tx.state();
            let mut per_user: BTreeMap<&str, Vec<&FeedbackEvent>> = BTreeMap::new();
            for e in state.feedback.events_for(key) {
                if e.kind.is_explicit() || cutoff.is_none_or(|c| e.at >= c) {
                    per_user.entry(&e.user_id).or_default().push(e);
                }
            }
            let stances: BTreeMap<String, Stance> = per_user
                .into_iter()
                .map(|(u, evs)| (u.to_string(), stance_from_events(evs, &self.config.weights)))
                .filter(|(_, s)| *s != Stance::None)
                .collect();
            aggregate_stances(&stances)
        };
        match &proposal {
            GoldProposal::Conflict { positions } => {
                let op = {
                    let conflicts = &tx.state().conflicts;
                    match conflicts.open_for(key) {
                        Some(c) if &c.positions != positions => {
                            Some(ConflictOp::Update { conflict_id: c.conflict_id, positions: positions.clone() })
                        }
                        Some(_) => None,
                        None => {
                            let settled = conflicts.last_closed_for(key).is_some_and(|c| {
                                matches!(c.status, ConflictStatus::Resolved { .. }) && &c.positions == positions
                            });
                            (!settled).then(|| ConflictOp::Open { key: key.clone(), positions: positions.clone() })
                        }
                    }
                };
                if let Some(op) = op {
                    tx.commit(LogBody::Conflict(op))?;
                }
            }
            GoldProposal::Unanimous { label, provenance } => {
                if let Some(id) = tx.state().conflicts.open_for(key).map(|c| c.conflict_id) {
                    tx.commit(LogBody::Conflict(ConflictOp::Withdraw { conflict_id: id }))?;
                }
                let example = {
                    let state = tx.state();
                    should_replace(state.gold.live(key), *label, provenance).then(|| {
                        let text = state.store.get(key).map(|m| m.text.clone()).unwrap_or_default();
                        GoldExample::new(key, text, *label, provenance.clone(), now, state.gold.ratios())
                    })
                };
                if let Some(example) = example {
                    tx.commit(LogBody::Gold(GoldOp::Add { example }))?;
                }
            }
            GoldProposal::Insufficient => {}
        }
        Ok(proposal)
    }

    pub fn conflicts(&self, open_only: bool) -> Vec<feedloop_core::feedback::Conflict> {
        self.read(|state| {
            if open_only {
                state.conflicts.open_conflicts().cloned().collect()
            } else {
                state.conflicts.all().to_vec()
            }
        })
    }

    pub fn resolve_conflict(&self, conflict_id: u64, label: Label, resolver: &str) -> Result<GoldExample, ServiceError> {
        if resolver.trim().is_empty() {
            return Err(ServiceError::BadRequest("resolver id is empty".into()));
        }
        let resolver_id = self.pseudonym(resolver);
        self.write(|tx| {
            let key = tx.state().conflicts.check_resolve(conflict_id)?.key.clone();
            tx.commit(LogBody::Conflict(ConflictOp::Resolve { conflict_id, label, resolver_id: resolver_id.clone() }))?;
            let example = {
                let state = tx.state();
                let text = state.store.get(&key).map(|m| m.text.clone()).unwrap_or_default();
                GoldExample::new(&key, text, label, Provenance::Resolved { resolver_id }, self.clock.now(), state.gold.ratios())
            };
            tx.commit(LogBody::Gold(GoldOp::Add { example: example.clone() }))?;
            Ok(example)
        })
    }

    /// Seeds the gold set from labeled rows (the export format: channel_id,
    /// message_id, text, label, optional provenance). Rows for messages not
    /// in the store are ingested first. Returns the number of examples added.
    pub fn import_gold(&self, rows: &[GoldRow]) -> Result<usize, ServiceError> {
        self.write(|tx| {
            let mut added = 0;
            let mut by_channel: BTreeMap<&str, Vec<Message>> = BTreeMap::new();
            for row in rows {
                let key = MessageKey::new(row.channel_id.clone(), row.message_id);
                if !tx.state().store.contains(&key) {
                    let posted_at = row.posted_at.unwrap_or_default();
                    by_channel.entry(&row.channel_id).or_default().push(Message::new(&row.channel_id, row.message_id, posted_at, &row.text));
                }
            }
            for (channel, messages) in by_channel {
                let fresh = tx.state().store.new_messages(&messages);
                let duplicates = messages.len() - fresh.len();
                let keys: Vec<MessageKey> = fresh.iter().map(Message::key).collect();
                tx.commit(LogBody::Ingest { channel_id: channel.to_string(), messages: fresh, skipped: 0, duplicates })?;
                self.classify_new(tx, &keys)?;
            }
            for row in rows {
                let key = MessageKey::new(row.channel_id.clone(), row.message_id);
                let provenance = row.provenance.clone().unwrap_or(Provenance::Explicit);
                let example = {
                    let state = tx.state();
                    let text = state.store.get(&key).map(|m| m.text.clone()).unwrap_or_else(|| row.text.clone());
                    let live = state.gold.live(&key);
                    (live.map(|g| (g.label, &g.provenance)) != Some((row.label, &provenance))).then(|| {
                        GoldExample::new(&key, text, row.label, provenance.clone(), self.clock.now(), state.gold.ratios())
                    })
                };
                if let Some(example) = example {
                    tx.commit(LogBody::Gold(GoldOp::Add { example }))?;
                    added += 1;
                }
            }
            Ok(added)
        })
    }

    // ---- gold set -------------------------------------------------------

    /// Freezes the live gold set and runs due monitoring evaluations of
    /// hotfixed prompt versions against it.
    pub fn snapshot(&self) -> Result<SnapshotInfo, ServiceError> {
        let snap = self.write(|tx| {
            let preview = tx.state().gold.preview_snapshot();
            if tx.state().latest_snapshot.as_deref() != Some(preview.snapshot_id.as_str()) {
                tx.commit(LogBody::Gold(GoldOp::Snapshot { snapshot_id: preview.snapshot_id.clone() }))?;
            }
            Ok(preview)
        })?;
        let monitored = self.monitor(&snap)?;
        Ok(SnapshotInfo { snapshot_id: snap.snapshot_id.clone(), size: snap.len(), counts: snap.counts.clone(), monitored })
    }

    fn monitor(&self, snap: &DatasetSnapshot) -> Result<Vec<String>, ServiceError> {
        let now = self.clock.now();
        let due: Vec<VersionRecord> =
            self.read(|s| s.registry.versions().filter(|v| v.monitoring_overdue(now)).cloned().collect());
        let mut monitored = Vec::new();
        for version in due {
            match evaluate(&version, snap, Split::Validation, self.client(), self.config.lifecycle.exec) {
                Ok(report) => {
                    self.write(|tx| {
                        tx.commit(LogBody::Version {
                            event: VersionEvent::Monitored {
                                version_id: version.version_id.clone(),
                                report,
                                actor: "monitor".into(),
                                at: now,
                            },
                        })
                    })?;
                    monitored.push(version.version_id);
                }
                Err(e) => tracing::warn!(version = %version.version_id, error = %e, "monitoring evaluation skipped"),
            }
        }
        Ok(monitored)
    }

    fn snapshot_for(&self, state: &AppState, snapshot_id: Option<&str>) -> Result<DatasetSnapshot, ServiceError> {
        let id = match snapshot_id {
            Some(id) => id.to_string(),
            None => state.latest_snapshot.clone().ok_or(ServiceError::NoSnapshot)?,
        };
        Ok(state.gold.get_snapshot(&id)?.clone())
    }

    pub fn export<W: Write>(&self, snapshot_id: &str, split: Option<Split>, out: &mut W) -> Result<usize, ServiceError> {
        self.read(|state| Ok(state.gold.export(snapshot_id, split, out)?))
    }

    pub fn latest_snapshot(&self) -> Option<String> {
        self.read(|s| s.latest_snapshot.clone())
    }

    // ---- drift & retraining ---------------------------------------------

    pub fn drift_check(&self) -> Result<DriftOutcome, ServiceError> {
        let now = self.clock.now();
        self.write(|tx| {
            let report = {
                let state = tx.state();
                let model = state.registry.deployed(Pathway::Ft).ok_or(ServiceError::NoReference)?;
                let VersionPayload::Model(artifact) = &model.payload else { return Err(ServiceError::NoReference) };
                let mut recent: Vec<&Message> = state.store.iter().filter(|m| m.is_classifiable()).collect();
                recent.sort_by(|a, b| b.posted_at.cmp(&a.posted_at).then(b.ingest_seq.cmp(&a.ingest_seq)));
                let newest = recent.first().map(|m| m.posted_at).unwrap_or_default();
                let oldest = newest.plus_days(-i64::from(self.config.drift.window_days));
                let window: Vec<&Message> = recent
                    .into_iter()
                    .take_while(|m| m.posted_at >= oldest)
                    .take(self.config.drift.window_messages)
                    .collect();
                check_drift(&window, &artifact.vocab_profile, self.config.drift.thresholds, now, self.config.lifecycle.exec)?
            };
            tx.commit(LogBody::Drift { report: report.clone() })?;
            let retrain_queued = self.maybe_queue_retrain(tx, Some(&report), now)?;
            Ok(DriftOutcome { report, retrain_queued })
        })
    }

    fn maybe_queue_retrain(
        &self,
        tx: &mut Tx<'_>,
        report: Option<&DriftReport>,
        now: Timestamp,
    ) -> Result<Option<String>, ServiceError> {
        let reason = {
            let state = tx.state();
            let retrain = state.registry.retrain();
            if retrain.queued.is_some() {
                return Ok(None);
            }
            let lc = &self.config.lifecycle;
            let new_gold = retrain.new_gold_since_training(state.gold.additions());
            let due = schedule_due(retrain.last_trained_at, now, lc.schedule_days);
            if !retrain_trigger(report, new_gold, due, lc.min_new_gold) {
                return Ok(None);
            }
            let mut reasons = Vec::new();
            if let Some(r) = report.filter(|r| r.triggered) {
                reasons.push(format!("drift (jsd {:.3}, oov {:.3})", r.jsd, r.oov_rate));
            }
            if new_gold >= lc.min_new_gold {
                reasons.push(format!("{new_gold} new gold examples"));
            }
            if due {
                reasons.push("schedule".to_string());
            }
            reasons.join(", ")
        };
        tx.commit(LogBody::Version { event: VersionEvent::RetrainQueued { reason: reason.clone(), at: now } })?;
        Ok(Some(reason))
    }

    /// Trains a reference model on the snapshot's TRAIN split and registers
    /// it as a candidate. Without a snapshot id a fresh snapshot is taken.
    pub fn train(&self, req: &TrainRequest) -> Result<TrainOutcome, ServiceError> {
        let snapshot_id = match &req.snapshot_id {
            Some(id) => id.clone(),
            None => self.snapshot()?.snapshot_id,
        };
        let (snap, additions, job) = self.read(|state| {
            let snap = self.snapshot_for(state, Some(&snapshot_id))?;
            let additions = state.gold.additions();
            Ok::<_, ServiceError>((snap, additions, state.registry.retrain().queued.clone()))
        })?;
        let examples: Vec<(String, Label)> =
            snap.split(Split::Train).iter().map(|g| (g.text.clone(), g.label)).collect();
        let params = feedloop_core::classify::TrainParams { exec: self.config.lifecycle.exec, ..self.config.lifecycle.train };
        let artifact = train_reference(&examples, &params, &snap.snapshot_id)?;
        let actor = req.actor.clone().unwrap_or_else(|| "trainer".into());
        let rationale = req.rationale.clone().unwrap_or_else(|| match &job {
            Some(j) => format!("retrain job {}: {}", j.job_id, j.reason),
            None => format!("trained on snapshot {}", snap.snapshot_id),
        });
        let now = self.clock.now();
        self.write(|tx| {
            let version_id = tx.state().registry.next_version_id(Pathway::Ft);
            tx.commit(LogBody::Version {
                event: VersionEvent::Created {
                    version_id: version_id.clone(),
                    payload: VersionPayload::Model(artifact),
                    snapshot_id: snap.snapshot_id.clone(),
                    actor,
                    rationale,
                    at: now,
                },
            })?;
            let job_id = tx.state().registry.retrain().queued.as_ref().map(|j| j.job_id);
            tx.commit(LogBody::Version {
                event: VersionEvent::RetrainFinished {
                    gold_additions: additions,
                    version_id: Some(version_id.clone()),
                    at: now,
                },
            })?;
            Ok(TrainOutcome {
                version_id,
                snapshot_id: snap.snapshot_id.clone(),
                train_examples: examples.len(),
                retrain_job: job_id,
            })
        })
    }

    /// Registers an already built version as a CANDIDATE.
    pub fn register_version(
        &self,
        payload: VersionPayload,
        snapshot_id: &str,
        actor: &str,
        rationale: &str,
    ) -> Result<String, ServiceError> {
        let now = self.clock.now();
        self.write(|tx| {
            let version_id = tx.state().registry.next_version_id(payload.pathway());
            tx.commit(LogBody::Version {
                event: VersionEvent::Created {
                    version_id: version_id.clone(),
                    payload,
                    snapshot_id: snapshot_id.to_string(),
                    actor: actor.to_string(),
                    rationale: rationale.to_string(),
                    at: now,
                },
            })?;
            Ok(version_id)
        })
    }

    // ---- lifecycle ------------------------------------------------------

    pub fn versions(&self) -> Vec<VersionSummary> {
        let now = self.clock.now();
        self.read(|s| s.registry.versions().map(|v| summarize(v, now)).collect())
    }

    pub fn version(&self, version_id: &str) -> Result<VersionRecord, ServiceError> {
        self.read(|s| {
            s.registry
                .get(version_id)
                .cloned()
                .ok_or_else(|| LifecycleError::UnknownVersion(version_id.to_string()).into())
        })
    }

    /// VALIDATION report of a version; TEST is read only at deployment.
    pub fn evaluate(&self, version_id: &str, snapshot_id: Option<&str>, split: Split) -> Result<EvalReport, ServiceError> {
        if split == Split::Test {
            return Err(ServiceError::TestSplitReserved);
        }
        let (version, snap) = self.read(|s| {
            let v = s.registry.get(version_id).cloned().ok_or_else(|| LifecycleError::UnknownVersion(version_id.to_string()))?;
            Ok::<_, ServiceError>((v, self.snapshot_for(s, snapshot_id)?))
        })?;
        Ok(evaluate(&version, &snap, split, self.client(), self.config.lifecycle.exec)?)
    }

    /// Gates a candidate against the deployed version of its pathway on one
    /// snapshot and, unless `deploy` is off, deploys it when the gate passes.
    /// A version that already passed its gate is deployed on the gate's
    /// snapshot. TEST is evaluated once, right before the deployment record.
    pub fn promote(&self, version_id: &str, req: &PromoteRequest) -> Result<PromoteOutcome, ServiceError> {
        if req.actor.trim().is_empty() || req.rationale.trim().is_empty() {
            return Err(LifecycleError::MissingRationale.into());
        }
        let exec = self.config.lifecycle.exec;
        let (version, incumbent_v, snap) = self.read(|s| {
            let v = s.registry.get(version_id).cloned().ok_or_else(|| LifecycleError::UnknownVersion(version_id.to_string()))?;
            let inc = s.registry.deployed(v.pathway).filter(|d| d.version_id != version_id).cloned();
            let snapshot_id = v.gate.as_ref().map(|g| g.snapshot_id.as_str()).or(req.snapshot_id.as_deref());
            let snap = self.snapshot_for(s, snapshot_id)?;
            Ok::<_, ServiceError>((v, inc, snap))
        })?;
        let now = self.clock.now();
        let (candidate, incumbent) = match version.status {
            VersionStatus::Candidate => {
                let candidate = evaluate(&version, &snap, Split::Validation, self.client(), exec)?;
                let incumbent = match &incumbent_v {
                    Some(v) => Some(evaluate(v, &snap, Split::Validation, self.client(), exec)?),
                    None => None,
                };
                let margin = self.config.lifecycle.promotion_margin;
                self.write(|tx| {
                    tx.commit(LogBody::Version {
                        event: VersionEvent::Gated {
                            version_id: version_id.to_string(),
                            candidate: candidate.clone(),
                            incumbent: incumbent.clone(),
                            margin,
                            actor: req.actor.clone(),
                            at: now,
                        },
                    })
                })?;
                (candidate, incumbent)
            }
            VersionStatus::Validated => {
                let incumbent = incumbent_v.as_ref().and_then(|v| v.eval.clone());
                (version.eval.clone().expect("validated versions carry an eval"), incumbent)
            }
            status => {
                return Err(LifecycleError::InvalidTransition {
                    version_id: version_id.to_string(),
                    status,
                    action: "be promoted",
                }
                .into())
            }
        };
        self.write(|tx| {
            let (gate, pathway) = {
                let v = tx.state().registry.get(version_id).expect("version exists");
                (v.gate.clone().expect("gate recorded"), v.pathway)
            };
            let mut outcome = PromoteOutcome {
                version_id: version_id.to_string(),
                gate: gate.clone(),
                candidate,
                incumbent,
                test: None,
                deployed: false,
            };
            if gate.decision != GateDecision::Promote || !req.deploy {
                return Ok(outcome);
            }
            let registry = &tx.state().registry;
            if registry.rollout_pathway() == Some(pathway) {
                return Err(LifecycleError::RolloutActive(pathway).into());
            }
            if gate.incumbent != registry.deployed(pathway).map(|d| d.version_id.clone()) {
                return Err(LifecycleError::StaleGate { version_id: version_id.to_string() }.into());
            }
            let test = evaluate(&version, &snap, Split::Test, self.client(), exec)?;
            tx.commit(LogBody::Version {
                event: VersionEvent::Deployed {
                    version_id: version_id.to_string(),
                    test_eval: test.clone(),
                    actor: req.actor.clone(),
                    rationale: req.rationale.clone(),
                    at: now,
                },
            })?;
            outcome.test = Some(test);
            outcome.deployed = true;
            if self.config.lifecycle.backfill_on_deploy {
                self.backfill(tx, version_id)?;
            }
            Ok(outcome)
        })
    }

    pub fn retire(&self, version_id: &str, actor: &str, rationale: &str) -> Result<(), ServiceError> {
        let now = self.clock.now();
        self.write(|tx| {
            tx.commit(LogBody::Version {
                event: VersionEvent::Retired {
                    version_id: version_id.to_string(),
                    actor: actor.to_string(),
                    rationale: rationale.to_string(),
                    at: now,
                },
            })?;
            Ok(())
        })
    }

    /// Registers a prompt version and either gates it (GATED) or deploys it
    /// at once with a monitoring obligation (HOTFIX).
    pub fn apply_prompt_change(&self, change: &PromptChange) -> Result<PromptOutcome, ServiceError> {
        change.template.validate()?;
        let snapshot_id = match &change.snapshot_id {
            Some(id) => id.clone(),
            None => self.latest_snapshot().unwrap_or_default(),
        };
        let version_id =
            self.register_version(VersionPayload::Prompt(change.template.clone()), &snapshot_id, &change.actor, &change.rationale)?;
        match change.mode {
            PromptMode::Gated => {
                let req = PromoteRequest {
                    snapshot_id: change.snapshot_id.clone(),
                    actor: change.actor.clone(),
                    rationale: change.rationale.clone(),
                    deploy: true,
                };
                let promotion = self.promote(&version_id, &req)?;
                Ok(PromptOutcome { version_id, promotion: Some(promotion), review_after: None })
            }
            PromptMode::Hotfix => {
                let now = self.clock.now();
                let review_after = now.plus_days(i64::from(self.config.lifecycle.hotfix_review_days));
                self.write(|tx| {
                    tx.commit(LogBody::Version {
                        event: VersionEvent::Hotfixed {
                            version_id: version_id.clone(),
                            actor: change.actor.clone(),
                            rationale: change.rationale.clone(),
                            review_after,
                            at: now,
                        },
                    })?;
                    if self.config.lifecycle.backfill_on_deploy {
                        self.backfill(tx, &version_id)?;
                    }
                    Ok(())
                })?;
                Ok(PromptOutcome { version_id, promotion: None, review_after: Some(review_after) })
            }
        }
    }

    pub fn rollout(&self) -> Option<RolloutPolicy> {
        self.read(|s| s.registry.rollout().cloned())
    }

    pub fn start_rollout(&self, req: &RolloutRequest) -> Result<RolloutPolicy, ServiceError> {
        let now = self.clock.now();
        self.write(|tx| {
            let policy = {
                let reg = &tx.state().registry;
                let b = reg
                    .get(&req.variant_b)
                    .ok_or_else(|| LifecycleError::UnknownVersion(req.variant_b.clone()))?;
                let a = match &req.variant_a {
                    Some(a) => a.clone(),
                    None => reg
                        .deployed(b.pathway)
                        .map(|v| v.version_id.clone())
                        .ok_or_else(|| LifecycleError::InvalidPolicy(format!("no deployed {} version for arm A", b.pathway)))?,
                };
                RolloutPolicy {
                    variant_a: a,
                    variant_b: req.variant_b.clone(),
                    fraction_b: req.fraction_b,
                    key_basis: req.key_basis,
                    started_at: now,
                    review_after: now.plus_days(i64::from(req.review_days.unwrap_or(self.config.lifecycle.schedule_days))),
                }
            };
            tx.commit(LogBody::Rollout {
                event: VersionEvent::RolloutStarted {
                    policy: policy.clone(),
                    actor: req.actor.clone(),
                    rationale: req.rationale.clone(),
                },
            })?;
            for arm in [&policy.variant_a, &policy.variant_b] {
                self.backfill(tx, arm)?;
            }
            Ok(policy)
        })
    }

    pub fn update_rollout(&self, fraction_b: f64, actor: &str) -> Result<RolloutPolicy, ServiceError> {
        let now = self.clock.now();
        self.write(|tx| {
            tx.commit(LogBody::Rollout {
                event: VersionEvent::RolloutUpdated { fraction_b, actor: actor.to_string(), at: now },
            })?;
            Ok(tx.state().registry.rollout().cloned().expect("rollout active"))
        })
    }

    pub fn end_rollout(&self, actor: &str, rationale: &str) -> Result<(), ServiceError> {
        let now = self.clock.now();
        self.write(|tx| {
            tx.commit(LogBody::Rollout {
                event: VersionEvent::RolloutEnded { actor: actor.to_string(), rationale: rationale.to_string(), at: now },
            })?;
            Ok(())
        })
    }

    /// Few-shot grid on the snapshot's VALIDATION split; read-only.
    pub fn experiment(&self, req: &ExperimentRequest) -> Result<ExperimentReport, ServiceError> {
        let client = self.client().ok_or(LifecycleError::ClientRequired)?;
        let snap = self.read(|s| self.snapshot_for(s, req.snapshot_id.as_deref()))?;
        let spec = ExperimentSpec {
            k_values: req.k_values.clone(),
            strategies: req.strategies.clone(),
            seed: req.seed,
            snapshot_id: snap.snapshot_id.clone(),
            template_text: req.template_text.clone(),
        };
        Ok(fewshot_experiment(&spec, &snap, client, self.config.lifecycle.exec)?)
    }

    pub fn metrics(&self) -> Metrics {
        self.read(|state| {
            let mut feedback = FeedbackCounts::default();
            let mut users = BTreeSet::new();
            for e in state.feedback.events() {
                if e.kind.is_explicit() {
                    feedback.explicit += 1;
                } else {
                    feedback.implicit += 1;
                }
                users.insert(&e.user_id);
            }
            feedback.users = users.len();
            let latest_snapshot = state.latest_snapshot.as_deref().and_then(|id| state.gold.get_snapshot(id).ok()).map(|s| {
                SnapshotInfo { snapshot_id: s.snapshot_id.clone(), size: s.len(), counts: s.counts.clone(), monitored: vec![] }
            });
            let mut eval_reports = Vec::new();
            for v in state.registry.versions() {
                eval_reports.extend(v.eval.iter().cloned());
                eval_reports.extend(v.test_eval.iter().cloned());
            }
            Metrics {
                messages: state.store.len(),
                classified: state.classifications.len(),
                unparseable: state.unparsed.len(),
                feedback,
                gold_live: state.gold.len(),
                gold_additions: state.gold.additions(),
                latest_snapshot,
                conflicts_open: state.conflicts.open_conflicts().count(),
                conflicts_total: state.conflicts.all().len(),
                deployed: [Pathway::Ft, Pathway::P]
                    .into_iter()
                    .filter_map(|p| state.registry.deployed(p).map(|v| (p, v.version_id.clone())))
                    .collect(),
                rollout: state.registry.rollout().cloned(),
                retrain: state.registry.retrain().clone(),
                eval_reports,
                drift_history: state.drift_reports.clone(),
                last_seq: state.last_seq,
            }
        })
    }
}

/// One labeled row for [`Engine::import_gold`]; the gold export format
/// with optional `posted_at`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoldRow {
    pub channel_id: String,
    pub message_id: u64,
    pub text: String,
    pub label: Label,
    #[serde(default)]
    pub provenance: Option<Provenance>,
    #[serde(default)]
    pub posted_at: Option<Timestamp>,
}

pub fn parse_gold_rows(jsonl: &str) -> Result<Vec<GoldRow>, ServiceError> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| ServiceError::BadRequest(format!("gold row {}: {e}", n + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::EventLog;

    const CT_WORDS: [&str; 4] = ["chemtrails", "hoax", "staged", "coverup"];
    const NEWS_WORDS: [&str; 4] = ["council", "budget", "weather", "election"];

    fn text(i: u64, ct: bool) -> String {
        let words = if ct { CT_WORDS } else { NEWS_WORDS };
        format!("{} {} report {i}", words[i as usize % 4], words[(i as usize + 1) % 4])
    }

    fn rows(n: u64) -> Vec<GoldRow> {
        (0..n)
            .map(|i| GoldRow {
                channel_id: "seed".into(),
                message_id: i,
                text: text(i, i % 2 == 0),
                label: if i % 2 == 0 { Label::Ct } else { Label::NotCt },
                provenance: None,
                posted_at: Some(Timestamp(i as i64)),
            })
            .collect()
    }

    fn engine_with(config: Config, log: EventLog) -> Engine {
        Engine::with_log(config, Arc::new(ManualClock::new(Timestamp(1_000_000))), None, log).unwrap()
    }

    /// Engine with a deployed FT model trained on keyword gold.
    fn deployed(config: Config) -> Engine {
        let engine = engine_with(config, EventLog::memory());
        engine.import_gold(&rows(120)).unwrap();
        let trained = engine.train(&TrainRequest::default()).unwrap();
        let req = PromoteRequest { snapshot_id: None, actor: "ana".into(), rationale: "first model".into(), deploy: true };
        assert!(engine.promote(&trained.version_id, &req).unwrap().deployed);
        engine
    }

    fn post(engine: &Engine, id: u64, body: &str) {
        let m = Message::new("live", id, Timestamp(2_000 + id as i64), body);
        engine.ingest_messages("live", vec![m], 0).unwrap();
    }

    fn vote(engine: &Engine, user: &str, id: u64, kind: FeedbackAction, label: Option<Label>) -> FeedbackOutcome {
        let input = FeedbackInput {
            user_id: user.into(),
            channel_id: "live".into(),
            message_id: id,
            kind,
            label,
            displayed_version: None,
        };
        engine.record_feedback(&input).unwrap()
    }

    fn key(id: u64) -> MessageKey {
        MessageKey::new("live", id)
    }

    #[test]
    fn ingest_classifies_with_the_deployed_model() {
        let engine = deployed(Config::default());
        post(&engine, 1, "chemtrails hoax everywhere");
        let shown = engine.read(|s| engine.displayed_for(s, &key(1), None).cloned()).unwrap();
        assert_eq!(shown.label, Label::Ct);
        assert_eq!(shown.pathway, Pathway::Ft);
        let again = engine.ingest_messages("live", vec![Message::new("live", 1, Timestamp(0), "x")], 0).unwrap();
        assert_eq!((again.accepted, again.duplicates), (0, 1));
    }

    #[test]
    fn agreement_becomes_gold_and_disagreement_a_conflict() {
        let engine = deployed(Config::default());
        post(&engine, 1, "council budget vote");
        vote(&engine, "u1", 1, FeedbackAction::Agree, None);
        let gold = engine.read(|s| s.gold.live(&key(1)).cloned()).unwrap();
        assert_eq!((gold.label, gold.provenance), (Label::NotCt, Provenance::Explicit));

        vote(&engine, "u2", 1, FeedbackAction::Relabel, Some(Label::Ct));
        let open = engine.conflicts(true);
        assert_eq!(open.len(), 1);
        assert_eq!(open[0].positions.len(), 2);
        assert!(open[0].positions.keys().all(|u| u.starts_with("u-")), "raw ids stay out of state");

        let resolved = engine.resolve_conflict(open[0].conflict_id, Label::Ct, "lead").unwrap();
        assert_eq!(resolved.label, Label::Ct);
        assert!(matches!(resolved.provenance, Provenance::Resolved { .. }));
        assert!(engine.conflicts(true).is_empty());

        // The settled disagreement does not reopen, and the same user repeating
        // themselves changes nothing.
        vote(&engine, "u1", 1, FeedbackAction::Agree, None);
        assert!(engine.conflicts(true).is_empty());
        assert_eq!(engine.read(|s| s.gold.live(&key(1)).map(|g| g.label)), Some(Label::Ct));

        // A third dissenting position reopens it.
        vote(&engine, "u3", 1, FeedbackAction::Relabel, Some(Label::NotCt));
        assert_eq!(engine.conflicts(true).len(), 1);
    }

    #[test]
    fn retracted_disagreement_withdraws_the_conflict() {
        let engine = deployed(Config::default());
        post(&engine, 1, "hoax staged coverup");
        vote(&engine, "u1", 1, FeedbackAction::Agree, None);
        vote(&engine, "u2", 1, FeedbackAction::Disagree, None);
        assert_eq!(engine.conflicts(true).len(), 1);
        vote(&engine, "u2", 1, FeedbackAction::Relabel, Some(Label::Ct));
        assert!(engine.conflicts(true).is_empty());
        assert!(matches!(engine.conflicts(false)[0].status, ConflictStatus::Withdrawn { .. }));
    }

    #[test]
    fn implicit_feedback_needs_opt_in_and_never_overrides_explicit_gold() {
        let engine = deployed(Config::default());
        post(&engine, 1, "budget hoax");
        let click = |user: &str| ImplicitInput {
            user_id: user.into(),
            channel_id: "live".into(),
            message_id: 1,
            kind: ImplicitAction::Dwell,
            dwell_seconds: Some(60.0),
            displayed_version: None,
        };
        assert!(matches!(engine.record_implicit(&[click("u1")]), Err(ServiceError::ImplicitTrackingDisabled)));

        let mut config = Config::default();
        config.privacy.implicit_tracking = true;
        let engine = deployed(config);
        post(&engine, 1, "budget hoax");
        let shown = engine.read(|s| engine.displayed_for(s, &key(1), None).unwrap().label);
        vote(&engine, "u1", 1, FeedbackAction::Relabel, Some(shown.negate()));
        let before = engine.read(|s| s.gold.live(&key(1)).cloned());
        engine.record_implicit(&[click("u2"), click("u3"), click("u4")]).unwrap();
        assert_eq!(engine.read(|s| s.gold.live(&key(1)).cloned()), before);
        assert!(engine.conflicts(true).is_empty());

        post(&engine, 2, "weather council");
        let mut dwell = click("u5");
        dwell.message_id = 2;
        engine.record_implicit(&[dwell]).unwrap();
        let gold = engine.read(|s| s.gold.live(&key(2)).cloned()).unwrap();
        assert_eq!(gold.provenance, Provenance::Implicit);
        vote(&engine, "u6", 2, FeedbackAction::Agree, None);
        assert_eq!(engine.read(|s| s.gold.live(&key(2)).map(|g| g.provenance.clone())), Some(Provenance::Explicit));
    }

    #[test]
    fn feedback_on_unknown_messages_is_rejected() {
        let engine = deployed(Config::default());
        let input = FeedbackInput {
            user_id: "u".into(),
            channel_id: "live".into(),
            message_id: 404,
            kind: FeedbackAction::Agree,
            label: None,
            displayed_version: None,
        };
        assert_eq!(engine.record_feedback(&input).unwrap_err().code(), "UnknownMessage");
    }

    #[test]
    fn test_split_is_read_only_at_deployment() {
        let engine = deployed(Config::default());
        let v = engine.versions()[0].version_id.clone();
        assert!(matches!(engine.evaluate(&v, None, Split::Test), Err(ServiceError::TestSplitReserved)));
        assert!(engine.evaluate(&v, None, Split::Validation).is_ok());
        assert_eq!(engine.version(&v).unwrap().test_reads(), 1);
    }

    #[test]
    fn failed_append_leaves_state_equal_to_the_log() {
        let base = deployed(Config::default());
        let records = base.records().unwrap();
        let mut log = EventLog::memory_failing_after(records.len() + 2);
        for r in &records {
            log.append(r).unwrap();
        }
        let engine = engine_with(Config::default(), log);
        post(&engine, 1, "hoax");
        let digest = engine.digest();
        let err = engine.ingest_messages("live", vec![Message::new("live", 2, Timestamp(5), "more")], 0).unwrap_err();
        assert_eq!(err.code(), "StorageFailure");
        assert_eq!(engine.digest(), digest);
        let replayed = AppState::replay(Config::default().lifecycle.split_ratios, &engine.records().unwrap()).unwrap();
        assert_eq!(replayed.digest(), digest);
    }

    #[test]
    fn drift_check_needs_a_reference() {
        let engine = engine_with(Config::default(), EventLog::memory());
        assert!(matches!(engine.drift_check(), Err(ServiceError::NoReference)));
        let mut config = Config::default();
        config.drift.window_messages = 30;
        let engine = deployed(config);
        for i in 0..30 {
            post(&engine, i, &format!("quantum zebra banana {i}"));
        }
        let out = engine.drift_check().unwrap();
        assert!(out.report.triggered);
        assert!(out.retrain_queued.unwrap().contains("drift"));
        assert!(engine.drift_check().unwrap().retrain_queued.is_none(), "one queued job at a time");
        let trained = engine.train(&TrainRequest::default()).unwrap();
        assert!(trained.retrain_job.is_some());
        assert!(engine.read(|s| s.registry.retrain().queued.is_none()));
    }

    #[test]
    fn review_queue_orders_by_confidence() {
        let mut config = Config::default();
        config.lifecycle.review_threshold = 1.0;
        let engine = deployed(config);
        for (i, t) in ["hoax", "budget", "hoax staged coverup chemtrails"].iter().enumerate() {
            post(&engine, i as u64, t);
        }
        let queue = engine.review_queue(10);
        assert_eq!(queue.len(), 3);
        let confs: Vec<f64> = queue.iter().map(|q| q.classification.as_ref().unwrap().confidence).collect();
        assert!(confs.windows(2).all(|w| w[0] <= w[1]));
    }
}
