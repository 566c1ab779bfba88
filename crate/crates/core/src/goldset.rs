//! The growing gold-standard dataset: adjudicated labels with provenance,
//! hash-stable splits, immutable content-addressed snapshots and JSONL
//! export.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::Label;
use crate::feedback::ConflictQueue;
use crate::hash::basis_points;
use crate::ingest::MessageKey;
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum GoldError {
    #[error("split ratios must be non-negative and sum to 1: {0:?}")]
    BadRatios(SplitRatios),
    #[error("message {0} has an open conflict")]
    ConflictOpen(MessageKey),
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(String),
    #[error("gold example for {key} carries split {got}, expected {expected}")]
    SplitMismatch { key: MessageKey, got: Split, expected: Split },
    #[error("export failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Validation => "VALIDATION",
            Split::Test => "TEST",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.7, validation: 0.15, test: 0.15 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), GoldError> {
        let parts = [self.train, self.validation, self.test];
        let ok = parts.iter().all(|p| p.is_finite() && *p >= 0.0) && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(GoldError::BadRatios(*self))
        }
    }

    /// Split for a key; the ratios must already be valid.
    pub fn split_of(&self, key: &MessageKey) -> Split {
        let r = f64::from(basis_points(&key.to_string()));
        if r < 10_000.0 * self.train {
            Split::Train
        } else if r < 10_000.0 * (self.train + self.validation) {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

/// Hashes `"channel_id:message_id"` onto a 10 000-point grid and cuts it at
/// the cumulative ratios.
pub fn assign_split(key: &MessageKey, ratios: &SplitRatios) -> Result<Split, GoldError> {
    ratios.validate()?;
    Ok(ratios.split_of(key))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Explicit,
    Implicit,
    Resolved { resolver_id: String },
}

impl Provenance {
    pub fn kind(&self) -> &'static str {
        match self {
            Provenance::Explicit => "EXPLICIT",
            Provenance::Implicit => "IMPLICIT",
            Provenance::Resolved { .. } => "RESOLVED",
        }
    }
}

/// Serialized as `"EXPLICIT"`, `"IMPLICIT"` or `"RESOLVED:<resolver_id>"`.
impl Serialize for Provenance {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Provenance::Resolved { resolver_id } => serializer.collect_str(&format_args!("RESOLVED:{resolver_id}")),
            other => serializer.serialize_str(other.kind()),
        }
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        match s.as_str() {
            "EXPLICIT" => Ok(Provenance::Explicit),
            "IMPLICIT" => Ok(Provenance::Implicit),
            _ => s
                .strip_prefix("RESOLVED:")
                .map(|r| Provenance::Resolved { resolver_id: r.to_string() })
                .ok_or_else(|| serde::de::Error::custom(format!("unknown provenance {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldExample {
    pub channel_id: String,
    pub message_id: u64,
    /// Copied from the message when the example is created.
    pub text: String,
    pub label: Label,
    pub provenance: Provenance,
    pub created_at: Timestamp,
    pub split: Split,
}

impl GoldExample {
    pub fn new(
        key: &MessageKey,
        text: impl Into<String>,
        label: Label,
        provenance: Provenance,
        created_at: Timestamp,
        ratios: &SplitRatios,
    ) -> Self {
        GoldExample {
            channel_id: key.channel_id.clone(),
            message_id: key.message_id,
            text: text.into(),
            label,
            provenance,
            created_at,
            split: ratios.split_of(key),
        }
    }

    pub fn key(&self) -> MessageKey {
        MessageKey::new(self.channel_id.clone(), self.message_id)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub ct: usize,
    pub not_ct: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotCounts {
    pub train: LabelCounts,
    pub validation: LabelCounts,
    pub test: LabelCounts,
}

impl SnapshotCounts {
    fn bump(&mut self, split: Split, label: Label) {
        let slot = match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        };
        match label {
            Label::Ct => slot.ct += 1,
            Label::NotCt => slot.not_ct += 1,
        }
    }
}

/// Frozen view of the live gold set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub snapshot_id: String,
    /// `"<channel>:<id>@<version>"` in message-key order.
    pub example_ids: Vec<String>,
    pub counts: SnapshotCounts,
    pub examples: Vec<GoldExample>,
}

impl DatasetSnapshot {
    fn capture(live: &BTreeMap<MessageKey, GoldExample>, history: &BTreeMap<MessageKey, Vec<GoldExample>>) -> Self {
        let mut hasher = Sha256::new();
        let mut example_ids = Vec::with_capacity(live.len());
        let mut counts = SnapshotCounts::default();
        for (key, g) in live {
            let version = history.get(key).map_or(1, Vec::len);
            let id = format!("{key}@{version}");
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
            hasher.update(serde_json::to_vec(g).expect("gold example serializes"));
            hasher.update(b"\n");
            example_ids.push(id);
            counts.bump(g.split, g.label);
        }
        DatasetSnapshot {
            snapshot_id: hex::encode(&hasher.finalize()[..8]),
            example_ids,
            counts,
            examples: live.values().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&GoldExample> {
        self.examples.iter().filter(|g| g.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<GoldExample> {
        self.examples.iter().filter(|g| g.split == split).cloned().collect()
    }
}

#[derive(Serialize)]
struct ExportRow<'a> {
    channel_id: &'a str,
    message_id: u64,
    text: &'a str,
    label: Label,
    provenance: &'a Provenance,
    split: Split,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GoldSet {
    ratios: SplitRatios,
    live: BTreeMap<MessageKey, GoldExample>,
    history: BTreeMap<MessageKey, Vec<GoldExample>>,
    snapshots: BTreeMap<String, DatasetSnapshot>,
}

impl GoldSet {
    pub fn new(ratios: SplitRatios) -> Result<Self, GoldError> {
        ratios.validate()?;
        Ok(GoldSet { ratios, ..Default::default() })
    }

    pub fn ratios(&self) -> &SplitRatios {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn live(&self, key: &MessageKey) -> Option<&GoldExample> {
        self.live.get(key)
    }

    pub fn live_examples(&self) -> impl Iterator<Item = &GoldExample> {
        self.live.values()
    }

    pub fn history(&self, key: &MessageKey) -> &[GoldExample] {
        self.history.get(key).map_or(&[], Vec::as_slice)
    }

    /// Total gold additions, superseded ones included.
    pub fn additions(&self) -> usize {
        self.history.values().map(Vec::len).sum()
    }

    /// Checks that `g` could be added right now.
    pub fn check_add(&self, g: &GoldExample, conflicts: &ConflictQueue) -> Result<(), GoldError> {
        let key = g.key();
        if conflicts.is_open(&key) {
            return Err(GoldError::ConflictOpen(key));
        }
        let expected = self.live.get(&key).map_or_else(|| self.ratios.split_of(&key), |prev| prev.split);
        if g.split != expected {
            return Err(GoldError::SplitMismatch { key, got: g.split, expected });
        }
        Ok(())
    }

    /// Makes `g` the live example for its message, superseding any previous
    /// one. Returns the version number (history length).
    pub fn add_gold(&mut self, g: GoldExample, conflicts: &ConflictQueue) -> Result<usize, GoldError> {
        self.check_add(&g, conflicts)?;
        let key = g.key();
        let history = self.history.entry(key.clone()).or_default();
        history.push(g.clone());
        let version = history.len();
        self.live.insert(key, g);
        Ok(version)
    }

    /// Content-addressed view of the live set; repeated snapshots of the
    /// same content share one id.
    pub fn preview_snapshot(&self) -> DatasetSnapshot {
        DatasetSnapshot::capture(&self.live, &self.history)
    }

    pub fn snapshot(&mut self) -> DatasetSnapshot {
        let snap = self.preview_snapshot();
        self.snapshots.entry(snap.snapshot_id.clone()).or_insert_with(|| snap.clone());
        snap
    }

    pub fn get_snapshot(&self, snapshot_id: &str) -> Result<&DatasetSnapshot, GoldError> {
        self.snapshots.get(snapshot_id).ok_or_else(|| GoldError::UnknownSnapshot(snapshot_id.to_string()))
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &DatasetSnapshot> {
        self.snapshots.values()
    }

    /// Writes one JSON object per example in message-key order.
    pub fn export<W: Write>(&self, snapshot_id: &str, split: Option<Split>, out: &mut W) -> Result<usize, GoldError> {
        let snap = self.get_snapshot(snapshot_id)?;
        let mut written = 0;
        for g in snap.examples.iter().filter(|g| split.is_none_or(|s| g.split == s)) {
            let row = ExportRow {
                channel_id: &g.channel_id,
                message_id: g.message_id,
                text: &g.text,
                label: g.label,
                provenance: &g.provenance,
                split: g.split,
            };
            serde_json::to_writer(&mut *out, &row).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            written += 1;
        }
        Ok(written)
    }
}
