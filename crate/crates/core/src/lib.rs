//! Core of the feedloop monitoring service.
//!
//! Messages ingested from Telegram channel exports are classified with a
//! binary conspiracy-theory label and a confidence, either by a locally
//! trained reference classifier ([`classify::reference`]) or through a
//! prompted text-completion model ([`classify::prompt`]). Analyst feedback
//! ([`feedback`]) is aggregated into a growing gold-standard dataset
//! ([`goldset`]), vocabulary drift against the training corpus is tracked
//! ([`drift`]) and model/prompt versions move through a gated lifecycle
//! ([`lifecycle`]).
//!
//! Everything in this crate is deterministic: given the same inputs, seeds
//! and timestamps, every operation yields the same result. Batch work runs
//! on rayon when the `parallel` feature is enabled (see [`exec::Exec`]).

pub mod classify;
pub mod drift;
pub mod exec;
pub mod feedback;
pub mod goldset;
pub mod hash;
pub mod ingest;
pub mod lifecycle;
pub mod text;
pub mod time;

pub use classify::{Classification, Label, Pathway};
pub use exec::Exec;
pub use ingest::{Message, MessageKey};
pub use time::Timestamp;
