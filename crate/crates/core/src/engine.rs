//! The per-turn pipeline: window the history, predict a state, parse it,
//! acquire knowledge from the routed source and generate a grounded
//! response.
//!
//! A turn either completes or leaves the session untouched. Provider
//! failures abort the turn; everything else degrades and is recorded as an
//! error tag on the [`TurnResult`].

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::{append_turn, DialogError, DialogExample, Role, Session, Turn};
use crate::eval::{RunEntry, RunOutput};
use crate::knowledge::{
    CompletionClient, EntityDatabase, FixtureCompletion, FixtureSearch, HttpCompletionClient, HttpSearchClient,
    InContextExamples, KnowledgeError, KnowledgeItem, KnowledgeRouter, ProviderError, RetryPolicy, RouterSettings,
    SearchClient, POLICY_EXAMPLES,
};
use crate::policy::{
    build_history_window, generate_response, predict_state, response_input, state_input, BackendError, EchoBackend,
    GenerationBackend, PolicyError, RemoteBackend, ScriptedBackend, WindowConfig,
};
use crate::state::{parse_belief, parse_state, BeliefState, KnowledgeSource, State, Vocabulary};
use crate::text::collapse_ws;

/// Tag recorded when the predicted state failed to parse.
pub const TAG_STATE_FALLBACK: &str = "state_parse_fallback";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub window_ms: f64,
    pub state_ms: f64,
    pub acquire_ms: f64,
    pub response_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Everything one turn produced, for audit and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub raw_state_text: String,
    /// `None` when the raw state failed to parse.
    pub parsed_state: Option<State>,
    /// The state knowledge was actually acquired for, after fallback or override.
    pub routed_state: State,
    pub knowledge: KnowledgeItem,
    pub response_text: String,
    pub timing: StageTimings,
    #[serde(default)]
    pub errors: Vec<String>,
}

impl TurnResult {
    /// Equality ignoring wall-clock timings.
    pub fn same_outcome(&self, other: &TurnResult) -> bool {
        self.raw_state_text == other.raw_state_text
            && self.parsed_state == other.parsed_state
            && self.routed_state == other.routed_state
            && self.knowledge == other.knowledge
            && self.response_text == other.response_text
            && self.errors == other.errors
    }
}

/// What-if routing for one turn: replaces the predicted source and, when
/// given, the query (a belief string for the database).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub source: KnowledgeSource,
    #[serde(default)]
    pub query: Option<String>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error(transparent)]
    Dialog(#[from] DialogError),
    #[error(transparent)]
    Policy(PolicyError),
    #[error(transparent)]
    Knowledge(KnowledgeError),
    #[error("backend produced an empty response")]
    EmptyResponse,
    #[error("invalid override: {0}")]
    BadOverride(String),
    #[error("dialog {dialog_id} turn {turn}: missing gold {what}")]
    MissingGold { dialog_id: String, turn: usize, what: &'static str },
    #[error("dialog {dialog_id}: {source}")]
    InDialog {
        dialog_id: String,
        #[source]
        source: Box<EngineError>,
    },
    #[error("config: {0}")]
    Config(String),
}

impl EngineError {
    pub fn is_unavailable(&self) -> bool {
        match self {
            EngineError::ProviderUnavailable(_) => true,
            EngineError::InDialog { source, .. } => source.is_unavailable(),
            _ => false,
        }
    }
}

impl From<PolicyError> for EngineError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Backend(BackendError::Unavailable(p)) => EngineError::ProviderUnavailable(p.to_string()),
            PolicyError::Backend(b @ BackendError::Unscripted { .. }) => EngineError::ProviderUnavailable(b.to_string()),
            other => EngineError::Policy(other),
        }
    }
}

impl From<KnowledgeError> for EngineError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::Provider(p) => EngineError::ProviderUnavailable(p.to_string()),
            other => EngineError::Knowledge(other),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Remote {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
    Scripted {
        path: PathBuf,
        #[serde(default)]
        fallback: Option<String>,
    },
    Echo {
        output: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Http {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
    },
    Fixture {
        path: Option<PathBuf>,
    },
}

fn default_timeout_ms() -> u64 {
    10_000
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    200
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSettings {
    pub listen: String,
    pub session_log: PathBuf,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self { listen: "127.0.0.1:8080".into(), session_log: PathBuf::from("sessions.ndjson") }
    }
}

/// Engine configuration, usually read from a TOML file. Relative paths are
/// resolved against the file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub knowledge: RouterSettings,
    pub database: PathBuf,
    /// JSON [`Vocabulary`]; MultiWOZ defaults when absent.
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    /// JSON [`InContextExamples`] for the implicit provider.
    #[serde(default)]
    pub examples: Option<PathBuf>,
    pub backend: BackendConfig,
    pub search: ProviderConfig,
    pub completion: ProviderConfig,
    #[serde(default)]
    pub server: ServerSettings,
}

impl EngineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: EngineConfig =
            toml::from_str(&text).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.database);
        self.vocabulary.iter_mut().for_each(fix);
        self.examples.iter_mut().for_each(fix);
        fix(&mut self.server.session_log);
        if let BackendConfig::Scripted { path, .. } = &mut self.backend {
            fix(path);
        }
        for p in [&mut self.search, &mut self.completion] {
            if let ProviderConfig::Fixture { path: Some(path) } = p {
                fix(path);
            }
        }
    }

    /// Every referenced input file must exist.
    pub fn validate(&self) -> Result<(), EngineError> {
        self.window.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        let mut files: Vec<&Path> = vec![&self.database];
        files.extend(self.vocabulary.as_deref());
        files.extend(self.examples.as_deref());
        if let BackendConfig::Scripted { path, .. } = &self.backend {
            files.push(path);
        }
        for p in [&self.search, &self.completion] {
            if let ProviderConfig::Fixture { path: Some(path) } = p {
                files.push(path);
            }
        }
        match files.into_iter().find(|p| !p.exists()) {
            Some(missing) => Err(EngineError::Config(format!("missing file {}", missing.display()))),
            None => Ok(()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
}

fn retry(retries: u32, backoff_ms: u64) -> RetryPolicy {
    RetryPolicy { retries, base_delay: Duration::from_millis(backoff_ms) }
}

pub struct Engine {
    window: WindowConfig,
    vocab: Vocabulary,
    backend: Arc<dyn GenerationBackend>,
    router: Arc<KnowledgeRouter>,
}

impl Engine {
    pub fn new(
        window: WindowConfig,
        vocab: Vocabulary,
        backend: Arc<dyn GenerationBackend>,
        router: KnowledgeRouter,
    ) -> Self {
        Self { window, vocab, backend, router: Arc::new(router) }
    }

    pub fn from_config(cfg: &EngineConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let db = EntityDatabase::load(&cfg.database)?;
        let vocab = match &cfg.vocabulary {
            Some(p) => read_json(p)?,
            None => Vocabulary::multiwoz(),
        };
        let examples: InContextExamples = match &cfg.examples {
            Some(p) => read_json(p)?,
            None => InContextExamples::default(),
        };
        let backend: Arc<dyn GenerationBackend> = match &cfg.backend {
            BackendConfig::Remote { url, timeout_ms } => Arc::new(RemoteBackend::new(Arc::new(
                HttpCompletionClient::new(url, Duration::from_millis(*timeout_ms), RetryPolicy::default()),
            ))),
            BackendConfig::Scripted { path, fallback } => {
                let mut b = ScriptedBackend::load(path).map_err(|e| EngineError::Config(e.to_string()))?;
                if let Some(f) = fallback {
                    b = b.with_fallback(f);
                }
                Arc::new(b)
            }
            BackendConfig::Echo { output } => Arc::new(EchoBackend::new(output)),
        };
        let search: Arc<dyn SearchClient> = match &cfg.search {
            ProviderConfig::Http { url, timeout_ms, retries, backoff_ms } => Arc::new(HttpSearchClient::new(
                url,
                Duration::from_millis(*timeout_ms),
                retry(*retries, *backoff_ms),
            )),
            ProviderConfig::Fixture { path: Some(p) } => {
                Arc::new(FixtureSearch::load(p).map_err(|e| EngineError::Config(e.to_string()))?)
            }
            ProviderConfig::Fixture { path: None } => Arc::new(FixtureSearch::new()),
        };
        let completion: Arc<dyn CompletionClient> = match &cfg.completion {
            ProviderConfig::Http { url, timeout_ms, retries, backoff_ms } => Arc::new(HttpCompletionClient::new(
                url,
                Duration::from_millis(*timeout_ms),
                retry(*retries, *backoff_ms),
            )),
            ProviderConfig::Fixture { path: Some(p) } => {
                Arc::new(FixtureCompletion::load(p).map_err(|e| EngineError::Config(e.to_string()))?)
            }
            ProviderConfig::Fixture { path: None } => Arc::new(FixtureCompletion::new()),
        };
        if cfg.knowledge.implicit_mode == crate::knowledge::ImplicitMode::PolicyModel
            && examples.policy_dialogs.len() != POLICY_EXAMPLES
        {
            return Err(EngineError::Config(format!(
                "policy-model mode needs {POLICY_EXAMPLES} example dialogs, found {}",
                examples.policy_dialogs.len()
            )));
        }
        let router = KnowledgeRouter::new(db, search, completion, examples, cfg.knowledge.clone());
        Ok(Self::new(cfg.window.clone(), vocab, backend, router))
    }

    /// Same routing and cache, different generation backend.
    pub fn with_backend(&self, backend: Arc<dyn GenerationBackend>) -> Self {
        Self { window: self.window.clone(), vocab: self.vocab.clone(), backend, router: Arc::clone(&self.router) }
    }

    pub fn window(&self) -> &WindowConfig {
        &self.window
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn router(&self) -> &KnowledgeRouter {
        &self.router
    }

    /// Runs the pipeline for `history`, which ends with the current user turn.
    pub fn respond(&self, history: &[Turn], over: Option<&Override>) -> Result<TurnResult, EngineError> {
        let start = Instant::now();
        let mut errors = Vec::new();

        let window = build_history_window(history, &self.window)?;
        let t_window = start.elapsed();

        let raw_state_text = predict_state(self.backend.as_ref(), &window, &self.window)?;
        let parsed_state = match parse_state(&raw_state_text, &self.vocab) {
            Ok(s) => Some(s),
            Err(e) => {
                tracing::debug!(error = %e, raw = %raw_state_text, "state parse failed, routing to database");
                errors.push(TAG_STATE_FALLBACK.to_string());
                None
            }
        };
        let t_state = start.elapsed();

        let routed_state = match over {
            Some(o) => self.apply_override(o, parsed_state.as_ref(), history)?,
            None => parsed_state.clone().unwrap_or_else(|| State::database(BeliefState::default())),
        };
        let acquisition = self.router.acquire(&routed_state, history)?;
        errors.extend(acquisition.tags);
        let t_acquire = start.elapsed();

        let response_text = generate_response(self.backend.as_ref(), &window, &acquisition.item.text, &self.window)?;
        if response_text.trim().is_empty() {
            return Err(EngineError::EmptyResponse);
        }
        let total = start.elapsed();

        Ok(TurnResult {
            raw_state_text,
            parsed_state,
            routed_state,
            knowledge: acquisition.item,
            response_text,
            timing: StageTimings {
                window_ms: ms(t_window),
                state_ms: ms(t_state - t_window),
                acquire_ms: ms(t_acquire - t_state),
                response_ms: ms(total - t_acquire),
                total_ms: ms(total),
            },
            errors,
        })
    }

    fn apply_override(&self, o: &Override, predicted: Option<&State>, history: &[Turn]) -> Result<State, EngineError> {
        let query = o.query.as_deref().map(str::trim).filter(|q| !q.is_empty());
        match o.source {
            KnowledgeSource::Database => {
                let belief = match query {
                    Some(q) => parse_belief(q, &self.vocab).map_err(|e| EngineError::BadOverride(e.to_string()))?,
                    None => predicted.and_then(State::belief).cloned().unwrap_or_default(),
                };
                Ok(State::database(belief))
            }
            source => {
                let fallback = history.last().map(|t| collapse_ws(&t.text)).unwrap_or_default();
                let q = query.or_else(|| predicted.and_then(State::query)).unwrap_or(fallback.as_str()).to_string();
                State::with_query(source, &q).map_err(|e| EngineError::BadOverride(e.to_string()))
            }
        }
    }

    /// Appends the user turn, runs the pipeline and appends the response.
    /// On error the input session is returned to the caller untouched.
    pub fn run_turn(
        &self,
        session: &Session,
        user_text: &str,
        over: Option<&Override>,
    ) -> Result<(Session, TurnResult), EngineError> {
        let mut next = append_turn(session, Role::User, user_text)?;
        let result = self.respond(&next.turns, over)?;
        next = append_turn(&next, Role::System, &result.response_text)?;
        next.trace.push(result.clone());
        Ok((next, result))
    }

    /// Teacher-forced replay: each gold user turn is answered with the gold
    /// prefix as history; one result per system turn.
    pub fn run_dialog(&self, example: &DialogExample) -> Result<Vec<TurnResult>, EngineError> {
        example
            .exchanges()
            .map(|ex| self.respond(&example.turns[..=ex.user_index], None))
            .collect::<Result<_, _>>()
            .map_err(|e| EngineError::InDialog { dialog_id: example.dialog_id.clone(), source: Box::new(e) })
    }

    /// Replays every dialog into a run file.
    pub fn replay(&self, dialogs: &[DialogExample]) -> Result<RunOutput, EngineError> {
        let mut run = RunOutput::default();
        for dialog in dialogs {
            let results = self.run_dialog(dialog)?;
            let entries = dialog
                .exchanges()
                .zip(results)
                .map(|(ex, r)| RunEntry {
                    turn_index: ex.system_index,
                    raw_state_text: r.raw_state_text,
                    parsed_state: r.parsed_state,
                    response_text: r.response_text,
                })
                .collect();
            run.dialogs.insert(dialog.dialog_id.clone(), entries);
        }
        Ok(run)
    }

    /// A scripted backend that reproduces the gold states and responses of
    /// `dialogs` under teacher forcing, using this engine's knowledge routing.
    pub fn oracle_backend(&self, dialogs: &[DialogExample]) -> Result<ScriptedBackend, EngineError> {
        let mut script = ScriptedBackend::new();
        for dialog in dialogs {
            for ex in dialog.exchanges() {
                let missing = |what| EngineError::MissingGold {
                    dialog_id: dialog.dialog_id.clone(),
                    turn: ex.user_index,
                    what,
                };
                let gold = ex.gold_state().ok_or_else(|| missing("state"))?;
                let history = &dialog.turns[..=ex.user_index];
                let window = build_history_window(history, &self.window)?;
                script.insert(&state_input(&window, &self.window), gold.to_string());
                let knowledge = self.router.acquire(gold, history)?.item;
                script.insert(&response_input(&window, &knowledge.text, &self.window), ex.reference());
            }
        }
        Ok(script)
    }
}

impl From<ProviderError> for EngineError {
    fn from(e: ProviderError) -> Self {
        EngineError::ProviderUnavailable(e.to_string())
    }
}
