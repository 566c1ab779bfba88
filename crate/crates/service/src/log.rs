//! Append-only JSONL event log.
//!
//! One record per line. Sequence numbers start at 0 and are dense. A line
//! without its trailing newline is a torn write from a crash and is cut off
//! when the log is reopened; any other unreadable line is corruption.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use feedloop_core::drift::DriftReport;
use feedloop_core::feedback::FeedbackEvent;
use feedloop_core::goldset::GoldExample;
use feedloop_core::lifecycle::VersionEvent;
use feedloop_core::{Classification, Label, Message, MessageKey, Timestamp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("log line {line} is unreadable: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("gap in log: expected seq {expected}, found {found}")]
    GapDetected { expected: u64, found: u64 },
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub seq: u64,
    pub schema_version: u32,
    pub at: Timestamp,
    #[serde(flatten)]
    pub body: LogBody,
}

/// Flattened records are read in two steps: the envelope with a raw
/// payload, then the body with its tag in front. Buffering the whole record
/// would turn integer map keys into strings that no longer parse.
impl<'de> Deserialize<'de> for LogRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Envelope {
            seq: u64,
            schema_version: u32,
            at: Timestamp,
            kind: String,
            payload: Box<serde_json::value::RawValue>,
        }
        let env = Envelope::deserialize(d)?;
        let tagged = format!(
            "{{\"kind\":{},\"payload\":{}}}",
            serde_json::to_string(&env.kind).map_err(serde::de::Error::custom)?,
            env.payload.get()
        );
        let body = serde_json::from_str(&tagged).map_err(serde::de::Error::custom)?;
        Ok(LogRecord { seq: env.seq, schema_version: env.schema_version, at: env.at, body })
    }
}

impl LogRecord {
    pub fn new(seq: u64, at: Timestamp, body: LogBody) -> Self {
        LogRecord { seq, schema_version: SCHEMA_VERSION, at, body }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogBody {
    /// Only the messages that were new to the store.
    Ingest { channel_id: String, messages: Vec<Message>, skipped: usize, duplicates: usize },
    Classification { version_id: String, classifications: Vec<Classification>, unparseable: Vec<MessageKey> },
    Feedback { events: Vec<FeedbackEvent> },
    Gold(GoldOp),
    Conflict(ConflictOp),
    Drift { report: DriftReport },
    Version { event: VersionEvent },
    Rollout { event: VersionEvent },
}

impl LogBody {
    pub fn kind(&self) -> &'static str {
        match self {
            LogBody::Ingest { .. } => "INGEST",
            LogBody::Classification { .. } => "CLASSIFICATION",
            LogBody::Feedback { .. } => "FEEDBACK",
            LogBody::Gold(_) => "GOLD",
            LogBody::Conflict(_) => "CONFLICT",
            LogBody::Drift { .. } => "DRIFT",
            LogBody::Version { .. } => "VERSION",
            LogBody::Rollout { .. } => "ROLLOUT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GoldOp {
    Add { example: GoldExample },
    Snapshot { snapshot_id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConflictOp {
    Open { key: MessageKey, positions: BTreeMap<String, Label> },
    Update { conflict_id: u64, positions: BTreeMap<String, Label> },
    Resolve { conflict_id: u64, label: Label, resolver_id: String },
    Withdraw { conflict_id: u64 },
}

enum Sink {
    Memory { records: Vec<LogRecord>, fail_after: Option<usize> },
    File { file: File, path: PathBuf },
}

pub struct EventLog {
    sink: Sink,
    next_seq: u64,
    fsync_every: usize,
    unsynced: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io { path: path.to_path_buf(), source }
}

/// Parses log bytes. Returns the records and the byte length of the
/// readable prefix (everything up to the last complete line).
pub fn parse_log(bytes: &[u8]) -> Result<(Vec<LogRecord>, usize), LogError> {
    let mut records = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    while let Some(len) = bytes[offset..].iter().position(|&b| b == b'\n') {
        line_no += 1;
        let line = &bytes[offset..offset + len];
        offset += len + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record = parse_line(line, line_no)?;
        let expected = records.len() as u64;
        if record.seq != expected {
            return Err(LogError::GapDetected { expected, found: record.seq });
        }
        records.push(record);
    }
    Ok((records, offset))
}

fn parse_line(line: &[u8], line_no: usize) -> Result<LogRecord, LogError> {
    let value: serde_json::Value =
        serde_json::from_slice(line).map_err(|e| LogError::Corrupt { line: line_no, reason: e.to_string() })?;
    let version = value.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
    if version != u64::from(SCHEMA_VERSION) {
        return Err(LogError::UnsupportedSchema(version as u32));
    }
    serde_json::from_value(value).map_err(|e| LogError::Corrupt { line: line_no, reason: e.to_string() })
}

/// Reads every record of the log at `path`, ignoring a torn tail.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, LogError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(parse_log(&bytes)?.0)
}

impl EventLog {
    pub fn memory() -> Self {
        EventLog { sink: Sink::Memory { records: Vec::new(), fail_after: None }, next_seq: 0, fsync_every: 1, unsynced: 0 }
    }

    /// An in-memory log whose appends fail once it holds `n` records.
    pub fn memory_failing_after(n: usize) -> Self {
        let mut log = Self::memory();
        log.sink = Sink::Memory { records: Vec::new(), fail_after: Some(n) };
        log
    }

    /// Opens (or creates) the log file and returns its existing records.
    /// A torn final line is truncated away.
    pub fn open(path: &Path, fsync_every: usize) -> Result<(Self, Vec<LogRecord>), LogError> {
        let mut file =
            OpenOptions::new().read(true).append(true).create(true).open(path).map_err(io_err(path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(path))?;
        let (records, valid) = parse_log(&bytes)?;
        if valid < bytes.len() {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - valid, "truncating torn log tail");
            file.set_len(valid as u64).map_err(io_err(path))?;
            file.sync_all().map_err(io_err(path))?;
        }
        let log = EventLog {
            sink: Sink::File { file, path: path.to_path_buf() },
            next_seq: records.len() as u64,
            fsync_every: fsync_every.max(1),
            unsynced: 0,
        };
        Ok((log, records))
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory { .. } => None,
        }
    }

    /// Records of an in-memory log; file logs return `None`.
    pub fn memory_records(&self) -> Option<&[LogRecord]> {
        match &self.sink {
            Sink::Memory { records, .. } => Some(records),
            Sink::File { .. } => None,
        }
    }

    /// All records, from memory or re-read from disk.
    pub fn records(&self) -> Result<Vec<LogRecord>, LogError> {
        match &self.sink {
            Sink::Memory { records, .. } => Ok(records.clone()),
            Sink::File { path, .. } => read_log(path),
        }
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<u64, LogError> {
        if record.seq != self.next_seq {
            return Err(LogError::GapDetected { expected: self.next_seq, found: record.seq });
        }
        if record.schema_version != SCHEMA_VERSION {
            return Err(LogError::UnsupportedSchema(record.schema_version));
        }
        let mut line = serde_json::to_vec(record).map_err(|e| LogError::StorageFailure(e.to_string()))?;
        line.push(b'\n');
        match &mut self.sink {
            Sink::Memory { records, fail_after } => {
                if fail_after.is_some_and(|n| records.len() >= n) {
                    return Err(LogError::StorageFailure("injected append failure".into()));
                }
                records.push(record.clone());
            }
            Sink::File { file, path } => {
                file.write_all(&line).map_err(io_err(path))?;
                self.unsynced += 1;
                if self.unsynced >= self.fsync_every {
                    file.sync_data().map_err(io_err(path))?;
                    self.unsynced = 0;
                }
            }
        }
        self.next_seq += 1;
        Ok(record.seq)
    }

    pub fn sync(&mut self) -> Result<(), LogError> {
        if let Sink::File { file, path } = &mut self.sink {
            file.sync_data().map_err(io_err(path))?;
        }
        self.unsynced = 0;
        Ok(())
    }
}
