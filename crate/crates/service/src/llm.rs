//! HTTP text-completion client, the service's only outbound call.
//!
//! The endpoint receives `{"prompt": "..."}` and answers `{"text": "..."}`.
//! Blocking: call it from worker threads, never from an async task.

use std::sync::Arc;
use std::time::Duration;

use feedloop_core::classify::{CappedClient, ClientError, CompletionClient, ScriptedClient};
use serde::{Deserialize, Serialize};

use crate::config::LlmClientConfig;

pub struct HttpClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl HttpClient {
    pub fn new(endpoint: &str, token: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError(format!("cannot build http client: {e}")))?;
        Ok(HttpClient { http, endpoint: endpoint.to_string(), token })
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let mut req = self.http.post(&self.endpoint).json(&CompletionRequest { prompt });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| ClientError(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError(format!("endpoint answered {status}")));
        }
        resp.json::<CompletionResponse>().map(|r| r.text).map_err(|e| ClientError(format!("bad response body: {e}")))
    }
}

/// The configured client, or `None` when the pathway is disabled. A mock
/// script takes precedence over the endpoint.
pub fn from_config(cfg: &LlmClientConfig) -> Result<Option<Arc<dyn CompletionClient>>, ClientError> {
    if !cfg.enabled {
        return Ok(None);
    }
    if let Some(path) = &cfg.mock_script {
        let client = ScriptedClient::from_path(path)?;
        return Ok(Some(Arc::new(CappedClient::new(client, cfg.max_in_flight))));
    }
    let endpoint = cfg.endpoint.as_deref().ok_or_else(|| ClientError("llm_client.endpoint is not set".into()))?;
    let client = HttpClient::new(endpoint, cfg.token.clone(), Duration::from_secs(cfg.timeout_secs))?;
    Ok(Some(Arc::new(CappedClient::new(client, cfg.max_in_flight))))
}
