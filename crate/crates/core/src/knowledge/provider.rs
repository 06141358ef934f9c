//! Search and completion provider clients.
//!
//! Wire protocol:
//!
//! - search: `GET /search?q=<urlencoded>` returning
//!   `{"results": [{"title", "snippet", "url"}, ...]}`, best first;
//! - completion: `POST /complete` with `{"prompt", "max_tokens", "stop"}`
//!   returning `{"text"}`.
//!
//! The HTTP clients retry transport failures and 5xx responses with
//! exponential backoff. Fixture clients serve canned answers from JSON and
//! count their calls.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    #[serde(default)]
    pub title: String,
    pub snippet: String,
    #[serde(default)]
    pub url: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchHit>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub stop: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

pub trait SearchClient: Send + Sync {
    /// Ranked hits, best first.
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, ProviderError>;
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;
}

/// Hex SHA-256 of a string; fixture files are keyed by it.
pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, base_delay: Duration::from_millis(200) }
    }
}

enum Attempt {
    Retry(String),
    Fatal(ProviderError),
}

impl RetryPolicy {
    fn run<T>(&self, mut op: impl FnMut() -> Result<T, Attempt>) -> Result<T, ProviderError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) if attempt > self.retries => {
                    return Err(ProviderError::Unavailable { attempts: attempt, message })
                }
                Err(Attempt::Retry(message)) => {
                    tracing::warn!(attempt, %message, "provider call failed, retrying");
                    thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
                }
            }
        }
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn classify<B>(result: Result<ureq::http::Response<B>, ureq::Error>) -> Result<ureq::http::Response<B>, Attempt> {
    let resp = result.map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() {
        Err(Attempt::Retry(format!("HTTP {status}")))
    } else if !status.is_success() {
        Err(Attempt::Fatal(ProviderError::Rejected(format!("HTTP {status}"))))
    } else {
        Ok(resp)
    }
}

/// Search client speaking the `GET /search` protocol.
pub struct HttpSearchClient {
    base_url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpSearchClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        Self { base_url: base_url.into().trim_end_matches('/').to_string(), agent: agent(timeout), retry }
    }
}

impl SearchClient for HttpSearchClient {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, ProviderError> {
        let url = format!("{}/search", self.base_url);
        self.retry.run(|| {
            let mut resp = classify(self.agent.get(&url).query("q", query).call())?;
            resp.body_mut()
                .read_json::<SearchResponse>()
                .map(|r| r.results)
                .map_err(|e| Attempt::Fatal(ProviderError::Malformed(e.to_string())))
        })
    }
}

/// Completion client speaking the `POST /complete` protocol.
pub struct HttpCompletionClient {
    base_url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpCompletionClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        Self { base_url: base_url.into().trim_end_matches('/').to_string(), agent: agent(timeout), retry }
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let url = format!("{}/complete", self.base_url);
        self.retry.run(|| {
            let mut resp = classify(self.agent.post(&url).send_json(request))?;
            resp.body_mut()
                .read_json::<CompletionResponse>()
                .map_err(|e| Attempt::Fatal(ProviderError::Malformed(e.to_string())))
        })
    }
}

/// Canned search results keyed by normalized query. Unknown queries return
/// no hits.
#[derive(Default)]
pub struct FixtureSearch {
    results: HashMap<String, Vec<SearchHit>>,
    calls: AtomicUsize,
}

impl FixtureSearch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, query: &str, hits: Vec<SearchHit>) -> Self {
        self.results.insert(normalize(query), hits);
        self
    }

    /// Loads `{"<query>": [{"title", "snippet", "url"}, ...], ...}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ProviderError::Fixture(e.to_string()))?;
        let raw: HashMap<String, Vec<SearchHit>> =
            serde_json::from_str(&text).map_err(|e| ProviderError::Fixture(e.to_string()))?;
        Ok(Self { results: raw.into_iter().map(|(q, h)| (normalize(&q), h)).collect(), calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SearchClient for FixtureSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchHit>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.results.get(&normalize(query)).cloned().unwrap_or_default())
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
struct CompletionFixtureFile {
    #[serde(default)]
    responses: HashMap<String, String>,
    #[serde(default)]
    fallback: Option<String>,
}

/// Canned completions keyed by SHA-256 of the prompt, with an optional
/// fallback for unlisted prompts.
#[derive(Default)]
pub struct FixtureCompletion {
    responses: HashMap<String, String>,
    fallback: Option<String>,
    calls: AtomicUsize,
}

impl FixtureCompletion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(text: impl Into<String>) -> Self {
        Self { fallback: Some(text.into()), ..Self::default() }
    }

    pub fn with(mut self, prompt: &str, text: impl Into<String>) -> Self {
        self.responses.insert(digest(prompt), text.into());
        self
    }

    /// Loads `{"responses": {"<sha256 hex>": "text"}, "fallback": "text"}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ProviderError::Fixture(e.to_string()))?;
        let raw: CompletionFixtureFile =
            serde_json::from_str(&text).map_err(|e| ProviderError::Fixture(e.to_string()))?;
        Ok(Self { responses: raw.responses, fallback: raw.fallback, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionClient for FixtureCompletion {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .responses
            .get(&digest(&request.prompt))
            .or(self.fallback.as_ref())
            .cloned()
            .unwrap_or_default();
        Ok(CompletionResponse { text })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_hex_sha256() {
        assert_eq!(digest(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn retry_gives_up_after_two_retries() {
        let policy = RetryPolicy { retries: 2, base_delay: Duration::from_millis(1) };
        let mut calls = 0;
        let err = policy
            .run::<()>(|| {
                calls += 1;
                Err(Attempt::Retry("down".into()))
            })
            .unwrap_err();
        assert_eq!(calls, 3);
        assert_eq!(err, ProviderError::Unavailable { attempts: 3, message: "down".into() });
    }

    #[test]
    fn retry_recovers_and_fatal_short_circuits() {
        let policy = RetryPolicy { retries: 2, base_delay: Duration::from_millis(1) };
        let mut calls = 0;
        let v = policy
            .run(|| {
                calls += 1;
                if calls < 2 {
                    Err(Attempt::Retry("blip".into()))
                } else {
                    Ok(7)
                }
            })
            .unwrap();
        assert_eq!((v, calls), (7, 2));
        let mut calls = 0;
        let _ = policy.run::<()>(|| {
            calls += 1;
            Err(Attempt::Fatal(ProviderError::Rejected("400".into())))
        });
        assert_eq!(calls, 1);
    }

    #[test]
    fn fixtures() {
        let hit = SearchHit { title: "t".into(), snippet: "s".into(), url: "u".into() };
        let search = FixtureSearch::new().with("Cancel Taxi", vec![hit.clone()]);
        assert_eq!(search.search("cancel  taxi").unwrap(), vec![hit]);
        assert!(search.search("other").unwrap().is_empty());
        assert_eq!(search.calls(), 2);

        let lm = FixtureCompletion::new().with("p", "k");
        let req = |p: &str| CompletionRequest { prompt: p.into(), max_tokens: 5, stop: vec![] };
        assert_eq!(lm.complete(&req("p")).unwrap().text, "k");
        assert_eq!(lm.complete(&req("q")).unwrap().text, "");
    }
}
