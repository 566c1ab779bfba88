//! Explicit and implicit feedback, per-user stances, aggregation into gold
//! proposals, and the conflict queue.
//!
//! Explicit input always takes precedence: once a user has marked a label,
//! their implicit signals are ignored, and once any user has an explicit
//! stance on a message, implicit stances of other users are ignored too.
//! Implicit signals can only ever agree with the label that was displayed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::classify::{Classification, Label};
use crate::goldset::Provenance;
use crate::ingest::{Message, MessageKey, MessageStore};
use crate::time::Timestamp;

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("unknown message {0}")]
    UnknownMessage(MessageKey),
    #[error("invalid feedback event: {0}")]
    InvalidEvent(String),
    #[error("message {0} already has an open conflict")]
    DuplicateConflict(MessageKey),
    #[error("positions for {0} do not disagree")]
    NotConflicting(MessageKey),
    #[error("unknown conflict {0}")]
    UnknownConflict(u64),
    #[error("conflict {0} is already resolved")]
    AlreadyResolved(u64),
    #[error("conflict {0} was withdrawn")]
    Withdrawn(u64),
    #[error("window holds {available} messages, {requested} requested")]
    WindowTooSmall { available: usize, requested: usize },
    #[error("invalid action weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExplicitKind {
    Agree,
    Disagree,
    Relabel(Label),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ImplicitKind {
    Impression,
    ScrollPast,
    Click,
    /// Seconds the message was open.
    Dwell(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackKind {
    Explicit(ExplicitKind),
    Implicit(ImplicitKind),
}

impl FeedbackKind {
    pub fn is_explicit(&self) -> bool {
        matches!(self, FeedbackKind::Explicit(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub event_id: u64,
    /// Pseudonymous id; raw identities never reach the log.
    pub user_id: String,
    pub channel_id: String,
    pub message_id: u64,
    pub kind: FeedbackKind,
    /// The classification on screen when the user acted.
    pub displayed: Classification,
    pub at: Timestamp,
}

impl FeedbackEvent {
    pub fn key(&self) -> MessageKey {
        MessageKey::new(self.channel_id.clone(), self.message_id)
    }

    /// The label an explicit event stands for.
    pub fn explicit_label(&self) -> Option<Label> {
        match self.kind {
            FeedbackKind::Explicit(ExplicitKind::Agree) => Some(self.displayed.label),
            FeedbackKind::Explicit(ExplicitKind::Disagree) => Some(self.displayed.label.negate()),
            FeedbackKind::Explicit(ExplicitKind::Relabel(l)) => Some(l),
            FeedbackKind::Implicit(_) => None,
        }
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.displayed.channel_id != self.channel_id || self.displayed.message_id != self.message_id {
            return Err(FeedbackError::InvalidEvent("displayed classification belongs to another message".into()));
        }
        if !self.displayed.is_valid() {
            return Err(FeedbackError::InvalidEvent("displayed confidence outside [0, 1]".into()));
        }
        if let FeedbackKind::Implicit(ImplicitKind::Dwell(s)) = self.kind {
            if !(s.is_finite() && s >= 0.0) {
                return Err(FeedbackError::InvalidEvent(format!("dwell seconds must be >= 0, got {s}")));
            }
        }
        if self.user_id.is_empty() {
            return Err(FeedbackError::InvalidEvent("empty user id".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionWeights {
    pub impression: f64,
    pub scroll_past: f64,
    pub click: f64,
    pub dwell_per_10s: f64,
    /// Minimum summed weight for an implicit agreement.
    pub implicit_threshold: f64,
}

impl Default for ActionWeights {
    fn default() -> Self {
        ActionWeights { impression: 0.2, scroll_past: 0.1, click: 0.5, dwell_per_10s: 0.3, implicit_threshold: 1.0 }
    }
}

impl ActionWeights {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        let weights = [self.impression, self.scroll_past, self.click, self.dwell_per_10s];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FeedbackError::InvalidWeights("weights must be finite and >= 0".into()));
        }
        if !(self.implicit_threshold.is_finite() && self.implicit_threshold > 0.0) {
            return Err(FeedbackError::InvalidWeights("implicit threshold must be > 0".into()));
        }
        Ok(())
    }

    pub fn weight(&self, kind: ImplicitKind) -> f64 {
        match kind {
            ImplicitKind::Impression => self.impression,
            ImplicitKind::ScrollPast => self.scroll_past,
            ImplicitKind::Click => self.click,
            ImplicitKind::Dwell(secs) => self.dwell_per_10s * secs / 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stance {
    Explicit(Label),
    ImplicitAgree { weight: f64, label: Label },
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserStance {
    pub user_id: String,
    pub key: MessageKey,
    pub stance: Stance,
}

/// Stance of one user from their events on one message, in log order.
///
/// The latest explicit event wins. Without explicit events, implicit
/// weights are summed over the trailing run of events that saw the same
/// displayed classification as the latest one; a change of displayed label
/// or version starts the sum over.
pub fn stance_from_events<'a, I>(events: I, weights: &ActionWeights) -> Stance
where
    I: IntoIterator<Item = &'a FeedbackEvent>,
{
    let events: Vec<&FeedbackEvent> = events.into_iter().collect();
    if let Some(label) = events.iter().rev().find_map(|e| e.explicit_label()) {
        return Stance::Explicit(label);
    }
    let mut implicit = events.iter().rev().filter_map(|e| match e.kind {
        FeedbackKind::Implicit(kind) => Some((kind, &e.displayed)),
        FeedbackKind::Explicit(_) => None,
    });
    let Some((first_kind, shown)) = implicit.next() else {
        return Stance::None;
    };
    let same_display = |d: &Classification| d.label == shown.label && d.version_id == shown.version_id;
    let weight = weights.weight(first_kind)
        + implicit.take_while(|(_, d)| same_display(d)).map(|(k, _)| weights.weight(k)).sum::<f64>();
    if weight >= weights.implicit_threshold {
        Stance::ImplicitAgree { weight, label: shown.label }
    } else {
        Stance::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GoldProposal {
    Unanimous { label: Label, provenance: Provenance },
    Conflict { positions: BTreeMap<String, Label> },
    Insufficient,
}

/// Combines per-user stances.
///
/// Any explicit stance makes implicit ones irrelevant; explicit stances
/// that disagree form a conflict. Implicit-only agreement on one displayed
/// label is unanimous; implicit agreement on different displayed labels is
/// insufficient (implicit signals never count as disagreement).
pub fn aggregate_stances(stances: &BTreeMap<String, Stance>) -> GoldProposal {
    let explicit: BTreeMap<String, Label> = stances
        .iter()
        .filter_map(|(u, s)| match s {
            Stance::Explicit(l) => Some((u.clone(), *l)),
            _ => None,
        })
        .collect();
    if !explicit.is_empty() {
        let labels: BTreeSet<Label> = explicit.values().copied().collect();
        return match labels.len() {
            1 => GoldProposal::Unanimous { label: labels.into_iter().next().unwrap(), provenance: Provenance::Explicit },
            _ => GoldProposal::Conflict { positions: explicit },
        };
    }
    let implicit: BTreeSet<Label> = stances
        .values()
        .filter_map(|s| match s {
            Stance::ImplicitAgree { label, .. } => Some(*label),
            _ => None,
        })
        .collect();
    match implicit.len() {
        1 => GoldProposal::Unanimous { label: implicit.into_iter().next().unwrap(), provenance: Provenance::Implicit },
        _ => GoldProposal::Insufficient,
    }
}

/// Append-only feedback log with a per-message index.
#[derive(Clone, Debug, Default)]
pub struct FeedbackLog {
    events: Vec<FeedbackEvent>,
    by_key: BTreeMap<MessageKey, Vec<usize>>,
}

impl FeedbackLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Id the next appended event must carry; ids are log positions from 0.
    pub fn next_event_id(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn events(&self) -> &[FeedbackEvent] {
        &self.events
    }

    pub fn check_event(&self, e: &FeedbackEvent, store: &MessageStore) -> Result<(), FeedbackError> {
        if !store.contains(&e.key()) {
            return Err(FeedbackError::UnknownMessage(e.key()));
        }
        if e.event_id != self.next_event_id() {
            return Err(FeedbackError::InvalidEvent(format!(
                "event id {} out of order, expected {}",
                e.event_id,
                self.next_event_id()
            )));
        }
        e.validate()
    }

    pub fn record_event(&mut self, e: FeedbackEvent, store: &MessageStore) -> Result<u64, FeedbackError> {
        self.check_event(&e, store)?;
        let id = e.event_id;
        self.by_key.entry(e.key()).or_default().push(self.events.len());
        self.events.push(e);
        Ok(id)
    }

    pub fn events_for<'a>(&'a self, key: &MessageKey) -> impl DoubleEndedIterator<Item = &'a FeedbackEvent> + 'a {
        self.by_key.get(key).into_iter().flatten().map(|&i| &self.events[i])
    }

    /// Users with at least one event on the message.
    pub fn users_for(&self, key: &MessageKey) -> BTreeSet<String> {
        self.events_for(key).map(|e| e.user_id.clone()).collect()
    }

    pub fn user_stance(&self, user_id: &str, key: &MessageKey, weights: &ActionWeights) -> UserStance {
        let stance = stance_from_events(self.events_for(key).filter(|e| e.user_id == user_id), weights);
        UserStance { user_id: user_id.to_string(), key: key.clone(), stance }
    }

    /// Non-`None` stances of every user on the message.
    pub fn stances(&self, key: &MessageKey, weights: &ActionWeights) -> BTreeMap<String, Stance> {
        let mut per_user: BTreeMap<&str, Vec<&FeedbackEvent>> = BTreeMap::new();
        for e in self.events_for(key) {
            per_user.entry(&e.user_id).or_default().push(e);
        }
        per_user
            .into_iter()
            .map(|(u, evs)| (u.to_string(), stance_from_events(evs, weights)))
            .filter(|(_, s)| *s != Stance::None)
            .collect()
    }

    pub fn aggregate(&self, key: &MessageKey, weights: &ActionWeights) -> GoldProposal {
        aggregate_stances(&self.stances(key, weights))
    }
}

impl Serialize for FeedbackLog {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.events.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FeedbackLog {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let events = Vec::<FeedbackEvent>::deserialize(deserializer)?;
        let mut log = FeedbackLog::new();
        for e in events {
            if e.event_id != log.next_event_id() {
                return Err(serde::de::Error::custom("feedback event ids are not dense"));
            }
            log.by_key.entry(e.key()).or_default().push(log.events.len());
            log.events.push(e);
        }
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConflictStatus {
    Open,
    Resolved { label: Label, resolver_id: String, at: Timestamp },
    /// The participants came to agree before anyone resolved it.
    Withdrawn { at: Timestamp },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub conflict_id: u64,
    pub key: MessageKey,
    /// Explicit positions only.
    pub positions: BTreeMap<String, Label>,
    pub status: ConflictStatus,
    pub opened_at: Timestamp,
}

impl Conflict {
    pub fn is_open(&self) -> bool {
        self.status == ConflictStatus::Open
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub conflict_id: u64,
    pub key: MessageKey,
    pub label: Label,
    pub resolver_id: String,
    pub at: Timestamp,
}

fn disagree(positions: &BTreeMap<String, Label>) -> bool {
    positions.values().collect::<BTreeSet<_>>().len() > 1
}

/// Conflicts in creation order; ids are positions. At most one open
/// conflict per message.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ConflictQueue {
    conflicts: Vec<Conflict>,
    open_by_key: BTreeMap<MessageKey, u64>,
}

impl ConflictQueue {
    pub fn is_open(&self, key: &MessageKey) -> bool {
        self.open_by_key.contains_key(key)
    }

    pub fn open_for(&self, key: &MessageKey) -> Option<&Conflict> {
        self.open_by_key.get(key).map(|&id| &self.conflicts[id as usize])
    }

    pub fn get(&self, id: u64) -> Option<&Conflict> {
        self.conflicts.get(id as usize)
    }

    pub fn all(&self) -> &[Conflict] {
        &self.conflicts
    }

    pub fn open_conflicts(&self) -> impl Iterator<Item = &Conflict> {
        self.open_by_key.values().map(|&id| &self.conflicts[id as usize])
    }

    /// Latest conflict on the message that is no longer open.
    pub fn last_closed_for(&self, key: &MessageKey) -> Option<&Conflict> {
        self.conflicts.iter().rev().find(|c| &c.key == key && !c.is_open())
    }

    pub fn next_id(&self) -> u64 {
        self.conflicts.len() as u64
    }

    pub fn open(
        &mut self,
        key: MessageKey,
        positions: BTreeMap<String, Label>,
        at: Timestamp,
    ) -> Result<&Conflict, FeedbackError> {
        if self.is_open(&key) {
            return Err(FeedbackError::DuplicateConflict(key));
        }
        if !disagree(&positions) {
            return Err(FeedbackError::NotConflicting(key));
        }
        let id = self.next_id();
        self.open_by_key.insert(key.clone(), id);
        self.conflicts.push(Conflict { conflict_id: id, key, positions, status: ConflictStatus::Open, opened_at: at });
        Ok(&self.conflicts[id as usize])
    }

    fn open_mut(&mut self, id: u64) -> Result<&mut Conflict, FeedbackError> {
        let c = self.conflicts.get_mut(id as usize).ok_or(FeedbackError::UnknownConflict(id))?;
        match c.status {
            ConflictStatus::Open => Ok(c),
            ConflictStatus::Resolved { .. } => Err(FeedbackError::AlreadyResolved(id)),
            ConflictStatus::Withdrawn { .. } => Err(FeedbackError::Withdrawn(id)),
        }
    }

    /// New explicit feedback on a message under conflict updates the
    /// recorded positions.
    pub fn update_positions(&mut self, id: u64, positions: BTreeMap<String, Label>) -> Result<(), FeedbackError> {
        let c = self.open_mut(id)?;
        if !disagree(&positions) {
            return Err(FeedbackError::NotConflicting(c.key.clone()));
        }
        c.positions = positions;
        Ok(())
    }

    pub fn withdraw(&mut self, id: u64, at: Timestamp) -> Result<(), FeedbackError> {
        let c = self.open_mut(id)?;
        c.status = ConflictStatus::Withdrawn { at };
        let key = c.key.clone();
        self.open_by_key.remove(&key);
        Ok(())
    }

    pub fn check_resolve(&self, id: u64) -> Result<&Conflict, FeedbackError> {
        let c = self.conflicts.get(id as usize).ok_or(FeedbackError::UnknownConflict(id))?;
        match c.status {
            ConflictStatus::Open => Ok(c),
            ConflictStatus::Resolved { .. } => Err(FeedbackError::AlreadyResolved(id)),
            ConflictStatus::Withdrawn { .. } => Err(FeedbackError::Withdrawn(id)),
        }
    }

    pub fn resolve(&mut self, id: u64, label: Label, resolver_id: &str, at: Timestamp) -> Result<Resolution, FeedbackError> {
        let c = self.open_mut(id)?;
        c.status = ConflictStatus::Resolved { label, resolver_id: resolver_id.to_string(), at };
        let key = c.key.clone();
        self.open_by_key.remove(&key);
        Ok(Resolution { conflict_id: id, key, label, resolver_id: resolver_id.to_string(), at })
    }
}

/// Seeded uniform sample of `n` messages posted within `[from, to]`, for
/// dedicated rating views. Candidates are ordered by message key before
/// sampling, so the result does not depend on store order.
pub fn sample_rating_task<'a>(
    messages: impl IntoIterator<Item = &'a Message>,
    from: Timestamp,
    to: Timestamp,
    n: usize,
    seed: u64,
) -> Result<Vec<Message>, FeedbackError> {
    let mut window: Vec<&Message> = messages.into_iter().filter(|m| m.posted_at >= from && m.posted_at <= to).collect();
    if window.len() < n {
        return Err(FeedbackError::WindowTooSmall { available: window.len(), requested: n });
    }
    window.sort_by_key(|m| m.key());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, window.len(), n).into_iter().map(|i| window[i].clone()).collect())
}
