//! Model input serialization and generation backends.
//!
//! Two task prefixes share one backend:
//!
//! ```text
//! State Prediction: <history>
//! Response Generation: <history> <|knowledge|> <knowledge>
//! ```
//!
//! The history is a window of the last `2k + 1` utterances ending at the
//! current user turn, rendered as `user: ...` / `system: ...` and cut on the
//! left to the history budget. The response input is then cut on the right
//! (knowledge first) to the total input budget.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::{Role, Turn};
use crate::knowledge::{digest, CompletionClient, CompletionRequest, ProviderError};
use crate::text::collapse_ws;

pub const STATE_PREFIX: &str = "State Prediction: ";
pub const RESPONSE_PREFIX: &str = "Response Generation: ";
pub const KNOWLEDGE_MARKER: &str = "<|knowledge|>";

/// Counts and truncates text in model tokens.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
    /// The last `n` tokens of `text`.
    fn keep_last(&self, text: &str, n: usize) -> String;
    /// The first `n` tokens of `text`.
    fn keep_first(&self, text: &str, n: usize) -> String;
}

/// Whitespace-delimited tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn keep_last(&self, text: &str, n: usize) -> String {
        let toks: Vec<&str> = text.split_whitespace().collect();
        toks[toks.len().saturating_sub(n)..].join(" ")
    }

    fn keep_first(&self, text: &str, n: usize) -> String {
        text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
    }
}

fn whitespace_counter() -> Arc<dyn TokenCounter> {
    Arc::new(WhitespaceCounter)
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub history_window_k: usize,
    pub max_input_tokens: usize,
    pub max_history_tokens: usize,
    pub max_generation_tokens: usize,
    #[serde(skip, default = "whitespace_counter")]
    pub counter: Arc<dyn TokenCounter>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            history_window_k: 2,
            max_input_tokens: 512,
            max_history_tokens: 256,
            max_generation_tokens: 80,
            counter: whitespace_counter(),
        }
    }
}

impl fmt::Debug for WindowConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WindowConfig")
            .field("history_window_k", &self.history_window_k)
            .field("max_input_tokens", &self.max_input_tokens)
            .field("max_history_tokens", &self.max_history_tokens)
            .field("max_generation_tokens", &self.max_generation_tokens)
            .finish_non_exhaustive()
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = self.max_input_tokens > 0 && self.max_history_tokens > 0 && self.max_generation_tokens > 0;
        if !positive || self.max_history_tokens > self.max_input_tokens {
            return Err(PolicyError::InvalidWindow(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error(transparent)]
    Unavailable(#[from] ProviderError),
    #[error("scripted backend has no output for input {digest}")]
    Unscripted { digest: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("the last turn of the history is not a user turn")]
    LastTurnNotUser,
    #[error("invalid window configuration: {0}")]
    InvalidWindow(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Text-to-text generator standing in for the fine-tuned seq2seq model.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, input: &str, max_new_tokens: usize) -> Result<String, BackendError>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Arc<B> {
    fn generate(&self, input: &str, max_new_tokens: usize) -> Result<String, BackendError> {
        (**self).generate(input, max_new_tokens)
    }
}

/// Deterministic lookup keyed by SHA-256 hex of the full input.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScriptedBackend {
    script: HashMap<String, String>,
    fallback: Option<String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, input: &str, output: impl Into<String>) {
        self.script.insert(digest(input), output.into());
    }

    pub fn with(mut self, input: &str, output: impl Into<String>) -> Self {
        self.insert(input, output);
        self
    }

    /// Output for inputs missing from the script; without one they error.
    pub fn with_fallback(mut self, output: impl Into<String>) -> Self {
        self.fallback = Some(output.into());
        self
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let script: HashMap<String, String> = serde_json::from_str(&text)?;
        Ok(Self { script, fallback: None })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let sorted: std::collections::BTreeMap<_, _> = self.script.iter().collect();
        std::fs::write(path, serde_json::to_string_pretty(&sorted)?)
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, input: &str, _max_new_tokens: usize) -> Result<String, BackendError> {
        let key = digest(input);
        match self.script.get(&key).or(self.fallback.as_ref()) {
            Some(out) => Ok(out.clone()),
            None => Err(BackendError::Unscripted { digest: key }),
        }
    }
}

/// Returns one configured string for every input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EchoBackend {
    pub output: String,
}

impl EchoBackend {
    pub fn new(output: impl Into<String>) -> Self {
        Self { output: output.into() }
    }
}

impl GenerationBackend for EchoBackend {
    fn generate(&self, _input: &str, _max_new_tokens: usize) -> Result<String, BackendError> {
        Ok(self.output.clone())
    }
}

/// A model served behind the `POST /complete` protocol.
pub struct RemoteBackend {
    client: Arc<dyn CompletionClient>,
    stop: Vec<String>,
}

impl RemoteBackend {
    pub fn new(client: Arc<dyn CompletionClient>) -> Self {
        Self { client, stop: vec!["\n\n".to_string()] }
    }

    pub fn with_stop(mut self, stop: Vec<String>) -> Self {
        self.stop = stop;
        self
    }
}

impl GenerationBackend for RemoteBackend {
    fn generate(&self, input: &str, max_new_tokens: usize) -> Result<String, BackendError> {
        let request = CompletionRequest { prompt: input.to_string(), max_tokens: max_new_tokens, stop: self.stop.clone() };
        Ok(self.client.complete(&request)?.text)
    }
}

fn render(turn: &Turn) -> String {
    format!("{}: {}", turn.role.as_str(), collapse_ws(&turn.text))
}

/// Renders the history window ending at the current user turn.
pub fn build_history_window(turns: &[Turn], cfg: &WindowConfig) -> Result<String, PolicyError> {
    let last = turns.last().ok_or(PolicyError::EmptyHistory)?;
    if last.role != Role::User {
        return Err(PolicyError::LastTurnNotUser);
    }
    let span = 2 * cfg.history_window_k + 1;
    let rendered: Vec<String> = turns[turns.len().saturating_sub(span)..].iter().map(render).collect();
    let counter = &cfg.counter;
    for from in 0..rendered.len() {
        let window = rendered[from..].join(" ");
        if counter.count(&window) <= cfg.max_history_tokens {
            return Ok(window);
        }
    }
    // The current utterance alone is over budget: keep its tail.
    Ok(counter.keep_last(rendered.last().expect("non-empty"), cfg.max_history_tokens))
}

/// `State Prediction: <history>`, within the input budget.
pub fn state_input(history: &str, cfg: &WindowConfig) -> String {
    let counter = &cfg.counter;
    let overhead = counter.count(STATE_PREFIX);
    let budget = cfg.max_input_tokens.saturating_sub(overhead);
    if counter.count(history) > budget {
        format!("{STATE_PREFIX}{}", counter.keep_last(history, budget))
    } else {
        format!("{STATE_PREFIX}{history}")
    }
}

/// `Response Generation: <history> <|knowledge|> <knowledge>`, within the
/// input budget; knowledge is cut from the right after the history fits.
pub fn response_input(history: &str, knowledge: &str, cfg: &WindowConfig) -> String {
    let counter = &cfg.counter;
    let overhead = counter.count(&format!("{RESPONSE_PREFIX}{KNOWLEDGE_MARKER}"));
    let history_budget = cfg.max_input_tokens.saturating_sub(overhead);
    let history = if counter.count(history) > history_budget {
        counter.keep_last(history, history_budget)
    } else {
        history.to_string()
    };
    let head = format!("{RESPONSE_PREFIX}{history} {KNOWLEDGE_MARKER} ");
    let knowledge_budget = cfg.max_input_tokens.saturating_sub(counter.count(&head));
    if counter.count(knowledge) > knowledge_budget {
        format!("{head}{}", counter.keep_first(knowledge, knowledge_budget))
    } else {
        format!("{head}{knowledge}")
    }
}

/// Raw state text for the rendered history window.
pub fn predict_state(backend: &dyn GenerationBackend, history: &str, cfg: &WindowConfig) -> Result<String, PolicyError> {
    if history.trim().is_empty() {
        return Err(PolicyError::EmptyHistory);
    }
    Ok(backend.generate(&state_input(history, cfg), cfg.max_generation_tokens)?)
}

/// Grounded response for the rendered history and acquired knowledge.
pub fn generate_response(
    backend: &dyn GenerationBackend,
    history: &str,
    knowledge: &str,
    cfg: &WindowConfig,
) -> Result<String, PolicyError> {
    if history.trim().is_empty() {
        return Err(PolicyError::EmptyHistory);
    }
    Ok(backend.generate(&response_input(history, knowledge, cfg), cfg.max_generation_tokens)?)
}
