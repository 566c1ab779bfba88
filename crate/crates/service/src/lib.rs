//! Monitoring service over Telegram channel exports: ingestion,
//! classification, feedback capture, gold set curation, drift checks and a
//! gated model lifecycle, all recorded in an append-only event log.

pub mod api;
pub mod config;
pub mod engine;
pub mod error;
pub mod llm;
pub mod log;
pub mod state;

pub use config::Config;
pub use engine::{Clock, Engine, ManualClock, SystemClock};
pub use error::ServiceError;
pub use log::{EventLog, LogBody, LogRecord};
pub use state::AppState;
