//! Knowledge acquisition for a predicted state.
//!
//! A database state is answered by a local lookup rendered to plain text; a
//! query state goes to the search provider (explicit) or the completion
//! provider (implicit, as a policy model or as a knowledge base). Every
//! result is cached per (route, normalized query) so acquisition is a pure
//! function of its inputs for the lifetime of a router.

mod cache;
mod database;
mod prompt;
mod provider;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::RetrievalCache;
pub use database::{query_database, render_db_state, DomainMatches, EntityDatabase, Record};
pub use prompt::{build_kb_prompt, build_policy_prompt, InContextExamples, KbPair, PromptError, POLICY_EXAMPLES};
pub use provider::{
    digest, CompletionClient, CompletionRequest, CompletionResponse, FixtureCompletion, FixtureSearch,
    HttpCompletionClient, HttpSearchClient, ProviderError, RetryPolicy, SearchClient, SearchHit, SearchResponse,
};

use crate::dialog::Turn;
use crate::state::{serialize_belief, BeliefState, State};

/// Error tag recorded when a turn retrieved nothing.
pub const TAG_EMPTY_RETRIEVAL: &str = "empty_retrieval";
/// Error tag recorded when belief blocks name domains missing from the database.
pub const TAG_UNKNOWN_DOMAIN: &str = "database_unknown_domain";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Database,
    Explicit,
    ImplicitPolicy,
    ImplicitKb,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub provenance: Provenance,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_used: Option<String>,
}

impl KnowledgeItem {
    pub fn new(provenance: Provenance, text: impl Into<String>, query_used: Option<String>) -> Self {
        Self { provenance, text: text.into(), raw: None, query_used }
    }

    /// Nothing retrieved; the response is generated without knowledge.
    pub fn none(query_used: Option<String>) -> Self {
        Self::new(Provenance::None, "", query_used)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KnowledgeError {
    #[error("database has no domain '{0}'")]
    UnknownDomain(String),
    #[error("database: {0}")]
    Database(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplicitMode {
    PolicyModel,
    #[default]
    KnowledgeBase,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterSettings {
    pub implicit_mode: ImplicitMode,
    /// Completion budget for implicit knowledge, in provider tokens.
    pub completion_max_tokens: usize,
    pub stop: Vec<String>,
    pub caching: bool,
}

impl Default for RouterSettings {
    fn default() -> Self {
        Self {
            implicit_mode: ImplicitMode::KnowledgeBase,
            completion_max_tokens: 314,
            stop: vec!["\n\n".to_string()],
            caching: true,
        }
    }
}

/// Knowledge plus recoverable error tags raised while acquiring it.
#[derive(Clone, Debug, PartialEq)]
pub struct Acquisition {
    pub item: KnowledgeItem,
    pub tags: Vec<String>,
}

pub struct KnowledgeRouter {
    db: EntityDatabase,
    search: Arc<dyn SearchClient>,
    completion: Arc<dyn CompletionClient>,
    examples: InContextExamples,
    settings: RouterSettings,
    cache: RetrievalCache,
}

impl KnowledgeRouter {
    pub fn new(
        db: EntityDatabase,
        search: Arc<dyn SearchClient>,
        completion: Arc<dyn CompletionClient>,
        examples: InContextExamples,
        settings: RouterSettings,
    ) -> Self {
        Self { db, search, completion, examples, settings, cache: RetrievalCache::new() }
    }

    pub fn database(&self) -> &EntityDatabase {
        &self.db
    }

    pub fn settings(&self) -> &RouterSettings {
        &self.settings
    }

    pub fn examples(&self) -> &InContextExamples {
        &self.examples
    }

    pub fn cache(&self) -> &RetrievalCache {
        &self.cache
    }

    /// Acquires knowledge for `state`; `history` ends with the current user turn.
    pub fn acquire(&self, state: &State, history: &[Turn]) -> Result<Acquisition, KnowledgeError> {
        let mut tags = Vec::new();
        let item = match state {
            State::Database { belief } => {
                let known = BeliefState {
                    blocks: belief.blocks.iter().filter(|b| self.db.has_domain(&b.domain)).cloned().collect(),
                };
                if known.blocks.len() != belief.blocks.len() {
                    tags.push(TAG_UNKNOWN_DOMAIN.to_string());
                }
                let key = serialize_belief(&known);
                self.cached(Provenance::Database, &key, || {
                    let hits = query_database(&self.db, &known)?;
                    Ok(KnowledgeItem::new(Provenance::Database, render_db_state(&hits), Some(key.clone())))
                })?
            }
            State::Explicit { query } => self.cached(Provenance::Explicit, query, || {
                let hits = self.search.search(query)?;
                let Some(top) = hits.first().filter(|h| !h.snippet.trim().is_empty()) else {
                    return Ok(KnowledgeItem::none(Some(query.clone())));
                };
                let mut item = KnowledgeItem::new(Provenance::Explicit, top.snippet.trim(), Some(query.clone()));
                item.raw = serde_json::to_value(&hits).ok();
                Ok(item)
            })?,
            State::Implicit { query } => match self.settings.implicit_mode {
                ImplicitMode::KnowledgeBase => self.cached(Provenance::ImplicitKb, query, || {
                    let prompt = build_kb_prompt(&self.examples.kb_pairs, query)?;
                    self.complete(Provenance::ImplicitKb, prompt, query, |t| t.trim().to_string())
                })?,
                ImplicitMode::PolicyModel => {
                    let prompt = build_policy_prompt(&self.examples.policy_dialogs, history)?;
                    self.cached(Provenance::ImplicitPolicy, &prompt.clone(), || {
                        // The completion is the next system line; later lines
                        // would be the provider continuing the dialog.
                        self.complete(Provenance::ImplicitPolicy, prompt, query, |t| {
                            t.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string()
                        })
                    })?
                }
            },
        };
        if item.provenance == Provenance::None {
            tags.push(TAG_EMPTY_RETRIEVAL.to_string());
        }
        Ok(Acquisition { item, tags })
    }

    fn complete(
        &self,
        route: Provenance,
        prompt: String,
        query: &str,
        extract: impl Fn(&str) -> String,
    ) -> Result<KnowledgeItem, KnowledgeError> {
        let request = CompletionRequest {
            prompt,
            max_tokens: self.settings.completion_max_tokens,
            stop: self.settings.stop.clone(),
        };
        let response = self.completion.complete(&request)?;
        let text = extract(&response.text);
        if text.is_empty() {
            return Ok(KnowledgeItem::none(Some(query.to_string())));
        }
        let mut item = KnowledgeItem::new(route, text, Some(query.to_string()));
        item.raw = serde_json::to_value(&response).ok();
        Ok(item)
    }

    fn cached(
        &self,
        route: Provenance,
        key: &str,
        fetch: impl FnOnce() -> Result<KnowledgeItem, KnowledgeError>,
    ) -> Result<KnowledgeItem, KnowledgeError> {
        if self.settings.caching {
            if let Some(hit) = self.cache.get(route, key) {
                return Ok(hit);
            }
        }
        let item = fetch()?;
        if self.settings.caching {
            self.cache.insert(route, key, item.clone());
        }
        Ok(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialog::{DialogExample, GoalAnnotation};
    use crate::state::{BeliefBlock, KnowledgeSource};

    fn router(mode: ImplicitMode, search: Arc<FixtureSearch>, lm: Arc<FixtureCompletion>) -> KnowledgeRouter {
        let mut db = EntityDatabase::default();
        db.insert("restaurant", vec![Record::new("alimentum").with("area", "north")]);
        let dialog = |id: &str| DialogExample {
            dialog_id: id.into(),
            goal: GoalAnnotation::default(),
            turns: vec![Turn::user("hi"), Turn::system("hello")],
        };
        let examples = InContextExamples {
            policy_dialogs: vec![dialog("a"), dialog("b")],
            kb_pairs: vec![KbPair { query: "q1".into(), knowledge: "k1".into() }],
        };
        KnowledgeRouter::new(db, search, lm, examples, RouterSettings { implicit_mode: mode, ..Default::default() })
    }

    fn hit(snippet: &str) -> SearchHit {
        SearchHit { title: "t".into(), snippet: snippet.into(), url: "http://x".into() }
    }

    #[test]
    fn explicit_takes_top_snippet_and_caches() {
        let search = Arc::new(
            FixtureSearch::new().with("cancel taxi booking extra charge", vec![hit("No extra charge."), hit("second")]),
        );
        let r = router(ImplicitMode::KnowledgeBase, search.clone(), Arc::new(FixtureCompletion::new()));
        let state = State::with_query(KnowledgeSource::Explicit, "cancel taxi booking extra charge").unwrap();
        let first = r.acquire(&state, &[]).unwrap();
        assert_eq!(first.item.text, "No extra charge.");
        assert_eq!(first.item.provenance, Provenance::Explicit);
        let second = r.acquire(&state, &[]).unwrap();
        assert_eq!(serde_json::to_string(&first.item).unwrap(), serde_json::to_string(&second.item).unwrap());
        assert_eq!(search.calls(), 1);
    }

    #[test]
    fn empty_retrieval_degrades() {
        let r = router(ImplicitMode::KnowledgeBase, Arc::new(FixtureSearch::new()), Arc::new(FixtureCompletion::new()));
        let state = State::with_query(KnowledgeSource::Explicit, "nothing").unwrap();
        let a = r.acquire(&state, &[]).unwrap();
        assert_eq!(a.item.provenance, Provenance::None);
        assert_eq!(a.item.text, "");
        assert_eq!(a.tags, [TAG_EMPTY_RETRIEVAL]);
    }

    #[test]
    fn implicit_knowledge_base_uses_kb_prompt() {
        let prompt = build_kb_prompt(&[KbPair { query: "q1".into(), knowledge: "k1".into() }], "q").unwrap();
        let lm = Arc::new(FixtureCompletion::new().with(&prompt, " You can cancel. \n"));
        let r = router(ImplicitMode::KnowledgeBase, Arc::new(FixtureSearch::new()), lm.clone());
        let a = r.acquire(&State::with_query(KnowledgeSource::Implicit, "q").unwrap(), &[]).unwrap();
        assert_eq!(a.item.provenance, Provenance::ImplicitKb);
        assert_eq!(a.item.text, "You can cancel.");
        r.acquire(&State::with_query(KnowledgeSource::Implicit, "Q").unwrap(), &[]).unwrap();
        assert_eq!(lm.calls(), 1);
    }

    #[test]
    fn implicit_policy_model_takes_first_line() {
        let lm = Arc::new(FixtureCompletion::constant("Yes, they take cards.\nuser: thanks"));
        let r = router(ImplicitMode::PolicyModel, Arc::new(FixtureSearch::new()), lm);
        let history = [Turn::user("Do they take cards?")];
        let a = r.acquire(&State::with_query(KnowledgeSource::Implicit, "cards").unwrap(), &history).unwrap();
        assert_eq!(a.item.provenance, Provenance::ImplicitPolicy);
        assert_eq!(a.item.text, "Yes, they take cards.");
    }

    #[test]
    fn database_route_renders_and_skips_unknown_domains() {
        let r = router(ImplicitMode::KnowledgeBase, Arc::new(FixtureSearch::new()), Arc::new(FixtureCompletion::new()));
        let belief = BeliefState {
            blocks: vec![BeliefBlock::new("restaurant").with("area", "north"), BeliefBlock::new("police")],
        };
        let a = r.acquire(&State::database(belief), &[]).unwrap();
        assert_eq!(a.item.text, "restaurant matched = 1 ; name = alimentum ; area = north");
        assert_eq!(a.tags, [TAG_UNKNOWN_DOMAIN]);
        let a = r.acquire(&State::database(BeliefState::default()), &[]).unwrap();
        assert_eq!(a.item.text, "matched = 0");
    }
}
