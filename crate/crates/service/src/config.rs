//! Deployment configuration: a JSON file with one object per section, plus
//! `FEEDLOOP_<SECTION>__<FIELD>` environment overrides.

use std::path::{Path, PathBuf};

use feedloop_core::classify::TrainParams;
use feedloop_core::drift::DriftThresholds;
use feedloop_core::feedback::ActionWeights;
use feedloop_core::goldset::SplitRatios;
use feedloop_core::{Exec, Pathway};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const ENV_PREFIX: &str = "FEEDLOOP_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    /// No path keeps the log in memory (tests, dry runs).
    pub log_path: Option<PathBuf>,
    /// fsync after this many appended records; 1 syncs every record.
    pub fsync_every: usize,
    /// Write a state checkpoint next to the log every this many records.
    pub checkpoint_every: Option<u64>,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig { log_path: None, fsync_every: 1, checkpoint_every: Some(5_000) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub thresholds: DriftThresholds,
    pub window_messages: usize,
    pub window_days: u32,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig { thresholds: DriftThresholds::default(), window_messages: 1_000, window_days: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifecycleConfig {
    pub split_ratios: SplitRatios,
    pub promotion_margin: f64,
    pub min_new_gold: usize,
    pub schedule_days: u32,
    pub review_threshold: f64,
    pub hotfix_review_days: u32,
    /// Pathway whose classifications the feed shows.
    pub serving_pathway: Pathway,
    pub train: TrainParams,
    pub exec: Exec,
    /// Reclassify stored messages with a newly deployed model.
    pub backfill_on_deploy: bool,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            split_ratios: SplitRatios::default(),
            promotion_margin: 0.0,
            min_new_gold: 200,
            schedule_days: 7,
            review_threshold: 0.8,
            hotfix_review_days: 7,
            serving_pathway: Pathway::Ft,
            train: TrainParams::default(),
            exec: Exec::default(),
            backfill_on_deploy: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmClientConfig {
    /// The only outbound network call the service makes; off by default.
    pub enabled: bool,
    pub endpoint: Option<String>,
    pub token: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// JSONL script for the in-repo mock; used instead of the endpoint.
    pub mock_script: Option<PathBuf>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            enabled: false,
            endpoint: None,
            token: None,
            timeout_secs: 30,
            max_in_flight: 2,
            mock_script: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    /// Accept implicit interaction events at all.
    pub implicit_tracking: bool,
    /// Salt for pseudonymous user ids.
    pub user_salt: String,
    /// Implicit events older than this are ignored when aggregating.
    pub implicit_retention_days: Option<u32>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig { implicit_tracking: false, user_salt: "change-me".into(), implicit_retention_days: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub bearer_token: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { bind: "127.0.0.1:8080".into(), bearer_token: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub storage: StorageConfig,
    pub weights: ActionWeights,
    pub drift: DriftConfig,
    pub lifecycle: LifecycleConfig,
    pub llm_client: LlmClientConfig,
    pub privacy: PrivacyConfig,
    pub server: ServerConfig,
}

impl Config {
    /// Reads `path` (when given), then applies overrides from `vars`.
    pub fn load<I>(path: Option<&Path>, vars: I) -> Result<Config, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value = match path {
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
                serde_json::from_str(&raw).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        apply_env(&mut value, vars)?;
        let config: Config = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_env(path: Option<&Path>) -> Result<Config, ConfigError> {
        Self::load(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.weights.validate().map_err(|e| invalid(&e))?;
        self.lifecycle.split_ratios.validate().map_err(|e| invalid(&e))?;
        feedloop_core::classify::triage(0.5, self.lifecycle.review_threshold).map_err(|e| invalid(&e))?;
        if self.storage.fsync_every == 0 {
            return Err(ConfigError::Invalid("storage.fsync_every must be >= 1".into()));
        }
        if self.storage.checkpoint_every == Some(0) {
            return Err(ConfigError::Invalid("storage.checkpoint_every must be >= 1".into()));
        }
        if self.drift.window_messages == 0 {
            return Err(ConfigError::Invalid("drift.window_messages must be >= 1".into()));
        }
        if self.llm_client.max_in_flight == 0 {
            return Err(ConfigError::Invalid("llm_client.max_in_flight must be >= 1".into()));
        }
        if self.llm_client.enabled && self.llm_client.endpoint.is_none() && self.llm_client.mock_script.is_none() {
            return Err(ConfigError::Invalid("llm_client is enabled but has neither endpoint nor mock_script".into()));
        }
        if !self.lifecycle.promotion_margin.is_finite() {
            return Err(ConfigError::Invalid("lifecycle.promotion_margin must be finite".into()));
        }
        Ok(())
    }
}

/// `FEEDLOOP_LIFECYCLE__MIN_NEW_GOLD=50` sets `lifecycle.min_new_gold`.
/// Values are parsed as JSON when possible and taken as strings otherwise.
fn apply_env<I>(value: &mut Value, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut overrides: Vec<(String, String)> =
        vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__")).collect();
    overrides.sort();
    for (key, raw) in overrides {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(ConfigError::Invalid(format!("bad override name {key}")));
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut slot = &mut *value;
        for part in &path {
            if !slot.is_object() {
                *slot = Value::Object(Default::default());
            }
            slot = slot.as_object_mut().expect("just made an object").entry(part.clone()).or_insert(Value::Null);
        }
        *slot = parsed;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults() {
        let c = Config::load(None, vars(&[])).unwrap();
        assert_eq!(c.lifecycle.min_new_gold, 200);
        assert_eq!(c.drift.thresholds, DriftThresholds { jsd: 0.2, oov: 0.3 });
        assert!(!c.llm_client.enabled);
        assert!(!c.privacy.implicit_tracking);
        assert_eq!(c.weights, ActionWeights::default());
    }

    #[test]
    fn env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"lifecycle":{"min_new_gold":10},"drift":{"thresholds":{"jsd":0.5,"oov":0.3}}}"#)
            .unwrap();
        let c = Config::load(
            Some(&path),
            vars(&[
                ("FEEDLOOP_LIFECYCLE__MIN_NEW_GOLD", "50"),
                ("FEEDLOOP_PRIVACY__USER_SALT", "pepper"),
                ("FEEDLOOP_DRIFT__THRESHOLDS__OOV", "0.9"),
                ("OTHER_VAR", "x"),
            ]),
        )
        .unwrap();
        assert_eq!(c.lifecycle.min_new_gold, 50);
        assert_eq!(c.privacy.user_salt, "pepper");
        assert_eq!(c.drift.thresholds, DriftThresholds { jsd: 0.5, oov: 0.9 });
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::load(None, vars(&[("FEEDLOOP_WEIGHTS__CLICK", "-1")])).is_err());
        assert!(Config::load(None, vars(&[("FEEDLOOP_LIFECYCLE__REVIEW_THRESHOLD", "0.2")])).is_err());
        assert!(Config::load(None, vars(&[("FEEDLOOP_STORAGE__NO_SUCH_FIELD", "1")])).is_err());
        assert!(Config::load(None, vars(&[("FEEDLOOP_LLM_CLIENT__ENABLED", "true")])).is_err());
    }
}
