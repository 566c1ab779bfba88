//! Text-completion client interface and in-repo test doubles.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use serde::Deserialize;
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ClientError(pub String);

/// Anything that turns a prompt into completion text.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

impl<F> CompletionClient for F
where
    F: Fn(&str) -> Result<String, ClientError> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self(prompt)
    }
}

impl<C: CompletionClient + ?Sized> CompletionClient for std::sync::Arc<C> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        (**self).complete(prompt)
    }
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    #[serde(default)]
    when: Option<String>,
    text: String,
}

/// Deterministic mock driven by a JSONL script.
///
/// Each line is `{"text": "..."}` or `{"when": "substring", "text": "..."}`.
/// Lines with `when` are rules: the first rule whose substring occurs in
/// the prompt answers, every time. Prompts no rule matches consume the
/// remaining lines in order; once those run out, calls fail.
///
/// Rule-only scripts are pure functions of the prompt and safe to use from
/// concurrent evaluations.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    rules: Vec<(String, String)>,
    queue: Mutex<VecDeque<String>>,
    calls: AtomicUsize,
}

impl ScriptedClient {
    pub fn from_jsonl(script: &str) -> Result<Self, ClientError> {
        let mut client = ScriptedClient::default();
        for (n, line) in script.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: ScriptLine =
                serde_json::from_str(line).map_err(|e| ClientError(format!("script line {}: {e}", n + 1)))?;
            match parsed.when {
                Some(when) => client.rules.push((when, parsed.text)),
                None => client.queue.get_mut().expect("fresh mutex").push_back(parsed.text),
            }
        }
        Ok(client)
    }

    pub fn from_path(path: &Path) -> Result<Self, ClientError> {
        let script = std::fs::read_to_string(path).map_err(|e| ClientError(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&script)
    }

    /// Answers prompts with the given responses in order.
    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedClient { queue: Mutex::new(responses.into_iter().map(Into::into).collect()), ..Default::default() }
    }

    pub fn with_rule(mut self, when: impl Into<String>, text: impl Into<String>) -> Self {
        self.rules.push((when.into(), text.into()));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionClient for ScriptedClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some((_, text)) = self.rules.iter().find(|(when, _)| prompt.contains(when.as_str())) {
            return Ok(text.clone());
        }
        self.queue
            .lock()
            .map_err(|_| ClientError("script lock poisoned".into()))?
            .pop_front()
            .ok_or_else(|| ClientError("mock script exhausted".into()))
    }
}

/// Caps the number of in-flight calls to the wrapped client.
pub struct CappedClient<C> {
    inner: C,
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

impl<C: CompletionClient> CappedClient<C> {
    pub fn new(inner: C, max_in_flight: usize) -> Self {
        CappedClient { inner, max_in_flight: max_in_flight.max(1), in_flight: Mutex::new(0), released: Condvar::new() }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: CompletionClient> CompletionClient for CappedClient<C> {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        {
            let mut n = self.in_flight.lock().map_err(|_| ClientError("cap lock poisoned".into()))?;
            while *n >= self.max_in_flight {
                n = self.released.wait(n).map_err(|_| ClientError("cap lock poisoned".into()))?;
            }
            *n += 1;
        }
        let result = self.inner.complete(prompt);
        if let Ok(mut n) = self.in_flight.lock() {
            *n -= 1;
        }
        self.released.notify_one();
        result
    }
}
