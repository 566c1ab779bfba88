#![allow(dead_code)]

use std::sync::Arc;

use feedloop_core::{Label, Timestamp};
use feedloop_service::engine::{GoldRow, PromoteRequest, TrainRequest};
use feedloop_service::{Config, Engine, EventLog, ManualClock};

pub const CT_WORDS: [&str; 6] = ["chemtrails", "hoax", "staged", "coverup", "reptilian", "psyop"];
pub const NEWS_WORDS: [&str; 6] = ["council", "budget", "weather", "election", "harbor", "festival"];

pub fn keyword_text(i: u64, ct: bool) -> String {
    let w = if ct { CT_WORDS } else { NEWS_WORDS };
    format!("{} and {} update {i}", w[i as usize % 6], w[(i as usize / 6 + 1) % 6])
}

pub fn gold_rows(channel: &str, n: u64) -> Vec<GoldRow> {
    (0..n)
        .map(|i| GoldRow {
            channel_id: channel.into(),
            message_id: i,
            text: keyword_text(i, i % 2 == 0),
            label: if i % 2 == 0 { Label::Ct } else { Label::NotCt },
            provenance: None,
            posted_at: Some(Timestamp(1_600_000_000 + i as i64)),
        })
        .collect()
}

pub fn gold_jsonl(channel: &str, n: u64) -> String {
    gold_rows(channel, n).iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

pub fn clock() -> Arc<ManualClock> {
    Arc::new(ManualClock::new(Timestamp(1_700_000_000)))
}

pub fn memory_engine(config: Config) -> Engine {
    Engine::with_log(config, clock(), None, EventLog::memory()).unwrap()
}

/// Imports keyword gold, trains and deploys a first FT model.
pub fn bootstrap(engine: &Engine) -> String {
    engine.import_gold(&gold_rows("seed", 120)).unwrap();
    let v = engine.train(&TrainRequest::default()).unwrap().version_id;
    let req = PromoteRequest { snapshot_id: None, actor: "ana".into(), rationale: "bootstrap".into(), deploy: true };
    assert!(engine.promote(&v, &req).unwrap().deployed);
    v
}
