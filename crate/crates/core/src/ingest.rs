//! Telegram desktop-export parsing, the deduplicating message store and
//! feed search.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::text::nfc;
use crate::time::Timestamp;

pub const MAX_PAGE_SIZE: u32 = 200;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("malformed export: {0}")]
    MalformedExport(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

/// Identity of a message: channel plus the per-channel message id.
///
/// Serialized as `"<channel_id>:<message_id>"` so it can key JSON maps; the
/// id is numeric, so splitting on the last `:` is unambiguous.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MessageKey {
    pub channel_id: String,
    pub message_id: u64,
}

impl MessageKey {
    pub fn new(channel_id: impl Into<String>, message_id: u64) -> Self {
        MessageKey { channel_id: channel_id.into(), message_id }
    }
}

impl fmt::Display for MessageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.channel_id, self.message_id)
    }
}

impl FromStr for MessageKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (channel, id) = s.rsplit_once(':').ok_or_else(|| format!("message key without ':': {s}"))?;
        let message_id = id.parse().map_err(|_| format!("bad message id in key: {s}"))?;
        Ok(MessageKey::new(channel, message_id))
    }
}

impl Serialize for MessageKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MessageKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub channel_id: String,
    pub message_id: u64,
    pub posted_at: Timestamp,
    /// NFC-normalized, original case preserved.
    pub text: String,
    pub media_flag: bool,
    /// Assigned by [`MessageStore::ingest`]; freshly parsed messages carry 0.
    pub ingest_seq: u64,
}

impl Message {
    pub fn new(channel_id: impl Into<String>, message_id: u64, posted_at: Timestamp, text: &str) -> Self {
        Message {
            channel_id: channel_id.into(),
            message_id,
            posted_at,
            text: nfc(text),
            media_flag: false,
            ingest_seq: 0,
        }
    }

    pub fn key(&self) -> MessageKey {
        MessageKey::new(self.channel_id.clone(), self.message_id)
    }

    /// Media-only posts are stored but never classified.
    pub fn is_classifiable(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedExport {
    pub messages: Vec<Message>,
    /// Entries that were not plain messages or lacked an id or date.
    pub skipped: usize,
}

/// Parses a Telegram desktop export (`result.json`) for one channel.
pub fn parse_export(raw: &[u8], channel_id: &str) -> Result<ParsedExport, IngestError> {
    let root: Value =
        serde_json::from_slice(raw).map_err(|e| IngestError::MalformedExport(format!("not JSON: {e}")))?;
    let entries = root
        .get("messages")
        .and_then(Value::as_array)
        .ok_or_else(|| IngestError::MalformedExport("missing \"messages\" array".into()))?;

    let mut out = ParsedExport::default();
    for entry in entries {
        match parse_entry(entry, channel_id) {
            Some(m) => out.messages.push(m),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn parse_entry(entry: &Value, channel_id: &str) -> Option<Message> {
    if entry.get("type").and_then(Value::as_str) != Some("message") {
        return None;
    }
    let id = entry.get("id")?.as_u64()?;
    let posted_at = match entry.get("date").and_then(Value::as_str) {
        Some(d) => Timestamp::parse(d)?,
        None => Timestamp(entry.get("date_unixtime")?.as_str()?.parse().ok()?),
    };
    let text = entry.get("text").map(flatten_text).unwrap_or_default();
    let mut message = Message::new(channel_id, id, posted_at, &text);
    message.media_flag = entry.get("photo").is_some() || entry.get("file").is_some();
    Some(message)
}

/// Telegram stores rich text as an array of plain strings and entity
/// objects; the entity objects carry their visible text under `"text"`.
fn flatten_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| match p {
                Value::String(s) => Some(s.as_str()),
                Value::Object(o) => o.get("text").and_then(Value::as_str),
                _ => None,
            })
            .collect(),
        _ => String::new(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub duplicates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedQuery {
    pub text_query: Option<String>,
    pub channel_filter: Option<BTreeSet<String>>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub page: u32,
    pub page_size: u32,
}

impl FeedQuery {
    pub fn all(page_size: u32) -> Self {
        FeedQuery { page_size, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.page_size == 0 || self.page_size > MAX_PAGE_SIZE {
            return Err(IngestError::InvalidQuery(format!(
                "page_size must be in [1, {MAX_PAGE_SIZE}], got {}",
                self.page_size
            )));
        }
        if let (Some(from), Some(to)) = (self.from, self.to) {
            if from > to {
                return Err(IngestError::InvalidQuery("time range is inverted".into()));
            }
        }
        Ok(())
    }

    fn matches(&self, m: &Message, needle: Option<&str>) -> bool {
        if let Some(channels) = &self.channel_filter {
            if !channels.contains(&m.channel_id) {
                return false;
            }
        }
        if self.from.is_some_and(|from| m.posted_at < from) || self.to.is_some_and(|to| m.posted_at > to) {
            return false;
        }
        needle.is_none_or(|n| m.text.to_lowercase().contains(n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedPage<'a> {
    pub total: usize,
    pub items: Vec<&'a Message>,
}

/// In-memory message store keyed by (channel, message id).
#[derive(Clone, Debug, Default)]
pub struct MessageStore {
    messages: Vec<Message>,
    index: BTreeMap<MessageKey, usize>,
    next_seq: u64,
}

impl MessageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn get(&self, key: &MessageKey) -> Option<&Message> {
        self.index.get(key).map(|&i| &self.messages[i])
    }

    pub fn contains(&self, key: &MessageKey) -> bool {
        self.index.contains_key(key)
    }

    /// Messages in ingestion order.
    pub fn iter(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter()
    }

    /// The messages of `batch` that [`MessageStore::ingest`] would accept,
    /// without touching the store.
    pub fn new_messages(&self, batch: &[Message]) -> Vec<Message> {
        let mut seen = BTreeSet::new();
        batch
            .iter()
            .filter(|m| {
                let key = m.key();
                !self.index.contains_key(&key) && seen.insert(key)
            })
            .cloned()
            .collect()
    }

    pub fn ingest(&mut self, batch: Vec<Message>) -> IngestReport {
        let mut report = IngestReport::default();
        for mut m in batch {
            let key = m.key();
            if self.index.contains_key(&key) {
                report.duplicates += 1;
                continue;
            }
            m.ingest_seq = self.next_seq;
            self.next_seq += 1;
            self.index.insert(key, self.messages.len());
            self.messages.push(m);
            report.accepted += 1;
        }
        report
    }

    /// Case-insensitive substring search with conjunctive filters, newest
    /// first (ties broken by later ingestion first).
    pub fn search(&self, q: &FeedQuery) -> Result<FeedPage<'_>, IngestError> {
        q.validate()?;
        let needle = q.text_query.as_deref().map(str::to_lowercase).filter(|n| !n.is_empty());
        let mut hits: Vec<&Message> = self.messages.iter().filter(|m| q.matches(m, needle.as_deref())).collect();
        hits.sort_by(|a, b| b.posted_at.cmp(&a.posted_at).then(b.ingest_seq.cmp(&a.ingest_seq)));
        let total = hits.len();
        let start = (q.page as usize).saturating_mul(q.page_size as usize);
        let items = hits.into_iter().skip(start).take(q.page_size as usize).collect();
        Ok(FeedPage { total, items })
    }
}

impl Serialize for MessageStore {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.messages.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MessageStore {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let messages = Vec::<Message>::deserialize(deserializer)?;
        let mut store = MessageStore::new();
        for m in messages {
            if store.contains(&m.key()) {
                return Err(serde::de::Error::custom(format!("duplicate message {}", m.key())));
            }
            store.next_seq = store.next_seq.max(m.ingest_seq + 1);
            store.index.insert(m.key(), store.messages.len());
            store.messages.push(m);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(channel: &str, id: u64, at: i64, text: &str) -> Message {
        Message::new(channel, id, Timestamp(at), text)
    }

    #[test]
    fn parses_minimal_export() {
        let raw = br#"{"messages":[{"id":1,"type":"message","date":"2023-01-01T10:00:00","text":"hello"}]}"#;
        let parsed = parse_export(raw, "chan").unwrap();
        assert_eq!(parsed.skipped, 0);
        assert_eq!(parsed.messages.len(), 1);
        let m = &parsed.messages[0];
        assert_eq!((m.message_id, m.text.as_str(), m.channel_id.as_str()), (1, "hello", "chan"));
        assert_eq!(m.posted_at, Timestamp(1_672_567_200));
        assert!(!m.media_flag);
    }

    #[test]
    fn flattens_rich_text() {
        let raw = br#"{"messages":[{"id":3,"type":"message","date":"2023-01-01T10:00:00",
            "text":["a ", {"type":"mention","text":"@x"}, " b"]}]}"#;
        assert_eq!(parse_export(raw, "c").unwrap().messages[0].text, "a @x b");
    }

    #[test]
    fn skips_service_and_incomplete_entries() {
        let raw = br#"{"messages":[
            {"id":2,"type":"service","date":"2023-01-01T10:00:00"},
            {"type":"message","date":"2023-01-01T10:00:00","text":"no id"},
            {"id":4,"type":"message","text":"no date"},
            {"id":5,"type":"message","date":"2023-01-01T10:00:00","text":"","photo":"photos/1.jpg"}
        ]}"#;
        let parsed = parse_export(raw, "c").unwrap();
        assert_eq!(parsed.skipped, 3);
        assert_eq!(parsed.messages.len(), 1);
        assert!(parsed.messages[0].media_flag);
        assert!(!parsed.messages[0].is_classifiable());
    }

    #[test]
    fn rejects_malformed_exports() {
        assert!(matches!(parse_export(b"not json", "c"), Err(IngestError::MalformedExport(_))));
        assert!(matches!(parse_export(br#"{"chats":[]}"#, "c"), Err(IngestError::MalformedExport(_))));
    }

    #[test]
    fn normalizes_to_nfc() {
        let raw = "{\"messages\":[{\"id\":1,\"type\":\"message\",\"date\":\"2023-01-01T10:00:00\",\"text\":\"Cafe\u{301}\"}]}";
        assert_eq!(parse_export(raw.as_bytes(), "c").unwrap().messages[0].text, "Caf\u{e9}");
    }

    #[test]
    fn dedups_within_and_across_batches() {
        let mut store = MessageStore::new();
        let r = store.ingest(vec![msg("a", 1, 0, "x"), msg("a", 1, 0, "x")]);
        assert_eq!(r, IngestReport { accepted: 1, duplicates: 1 });
        let batch = vec![msg("a", 2, 0, "y"), msg("b", 1, 0, "z"), msg("b", 2, 0, "w")];
        assert_eq!(store.ingest(batch.clone()).accepted, 3);
        assert_eq!(store.ingest(batch), IngestReport { accepted: 0, duplicates: 3 });
        store.ingest(vec![msg("c", 1, 0, ""), msg("c", 2, 0, "")]);
        assert_eq!(store.len(), 6);
        let seqs: Vec<u64> = store.iter().map(|m| m.ingest_seq).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn search_orders_newest_first() {
        let mut store = MessageStore::new();
        store.ingest(vec![msg("a", 1, 10, "one"), msg("a", 2, 30, "two"), msg("b", 3, 20, "three")]);
        let page = store.search(&FeedQuery::all(10)).unwrap();
        let ids: Vec<u64> = page.items.iter().map(|m| m.message_id).collect();
        assert_eq!(ids, [2, 3, 1]);
        assert_eq!(page.total, 3);
    }

    #[test]
    fn search_ties_break_on_ingest_seq() {
        let mut store = MessageStore::new();
        store.ingest(vec![msg("a", 1, 5, "x"), msg("a", 2, 5, "y")]);
        let ids: Vec<u64> = store.search(&FeedQuery::all(10)).unwrap().items.iter().map(|m| m.message_id).collect();
        assert_eq!(ids, [2, 1]);
    }

    #[test]
    fn search_filters_are_conjunctive() {
        let mut store = MessageStore::new();
        store.ingest(vec![
            msg("A", 1, 10, "chemtrails are real"),
            msg("B", 2, 20, "Chemtrails again"),
            msg("A", 3, 30, "bread prices"),
        ]);
        let q = FeedQuery { text_query: Some("Chemtrail".into()), ..FeedQuery::all(10) };
        assert_eq!(store.search(&q).unwrap().total, 2);
        let q = FeedQuery { channel_filter: Some(["A".to_string()].into()), ..q };
        let page = store.search(&q).unwrap();
        assert_eq!(page.items.len(), 1);
        assert_eq!(page.items[0].message_id, 1);
        let q = FeedQuery { from: Some(Timestamp(15)), to: Some(Timestamp(30)), ..FeedQuery::all(10) };
        assert_eq!(store.search(&q).unwrap().total, 2);
    }

    #[test]
    fn search_paginates() {
        let mut store = MessageStore::new();
        store.ingest((0..25).map(|i| msg("a", i, i as i64, "t")).collect());
        let q = FeedQuery { page: 2, ..FeedQuery::all(10) };
        let page = store.search(&q).unwrap();
        assert_eq!(page.items.len(), 5);
        assert_eq!(page.items[0].message_id, 4);
    }

    #[test]
    fn rejects_bad_queries() {
        let store = MessageStore::new();
        assert!(store.search(&FeedQuery::all(0)).is_err());
        assert!(store.search(&FeedQuery::all(201)).is_err());
        let q = FeedQuery { from: Some(Timestamp(5)), to: Some(Timestamp(4)), ..FeedQuery::all(10) };
        assert!(matches!(store.search(&q), Err(IngestError::InvalidQuery(_))));
    }

    #[test]
    fn key_round_trips_through_string() {
        let key = MessageKey::new("chan:with:colons", 42);
        let s = serde_json::to_string(&key).unwrap();
        assert_eq!(s, "\"chan:with:colons:42\"");
        assert_eq!(serde_json::from_str::<MessageKey>(&s).unwrap(), key);
    }

    #[test]
    fn store_serde_preserves_sequence() {
        let mut store = MessageStore::new();
        store.ingest(vec![msg("a", 1, 0, "x"), msg("a", 2, 0, "y")]);
        let json = serde_json::to_string(&store).unwrap();
        let mut back: MessageStore = serde_json::from_str(&json).unwrap();
        back.ingest(vec![msg("a", 3, 0, "z")]);
        assert_eq!(back.get(&MessageKey::new("a", 3)).unwrap().ingest_seq, 2);
    }
}
