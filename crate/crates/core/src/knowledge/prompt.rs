//! In-context prompts for the implicit knowledge provider.
//!
//! Two schemes: the provider acts as a policy model and completes the next
//! system utterance, or acts as a knowledge base and completes a knowledge
//! snippet for a query. `\n` separates lines within an example, `\n\n`
//! separates examples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::{DialogExample, QuestionType, Turn};
use crate::text::collapse_ws;

/// Number of example dialogs the policy-model prompt takes.
pub const POLICY_EXAMPLES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("dialog history is empty")]
    EmptyHistory,
    #[error("policy prompt takes exactly {POLICY_EXAMPLES} example dialogs, got {found}")]
    BadExampleCount { found: usize },
    #[error("knowledge-base prompt needs at least one example pair")]
    NoExamples,
    #[error("query is empty")]
    EmptyQuery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbPair {
    pub query: String,
    pub knowledge: String,
}

/// Example material for both prompting schemes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextExamples {
    #[serde(default)]
    pub policy_dialogs: Vec<DialogExample>,
    #[serde(default)]
    pub kb_pairs: Vec<KbPair>,
}

impl InContextExamples {
    /// The first two dialogs and the first `pairs` answerable
    /// (query, selected knowledge) annotations of `dialogs`.
    pub fn from_dialogs(dialogs: &[DialogExample], pairs: usize) -> Self {
        let policy_dialogs = dialogs.iter().take(POLICY_EXAMPLES).cloned().collect();
        let kb_pairs = dialogs
            .iter()
            .flat_map(|d| d.qa_turns())
            .filter(|a| a.question_type == Some(QuestionType::Answerable))
            .filter_map(|a| {
                Some(KbPair { query: a.query()?.to_string(), knowledge: a.selected_knowledge.clone()? })
            })
            .take(pairs)
            .collect();
        Self { policy_dialogs, kb_pairs }
    }
}

fn lines<'a>(turns: impl IntoIterator<Item = &'a Turn>) -> String {
    turns.into_iter().map(|t| collapse_ws(&t.text)).collect::<Vec<_>>().join("\n")
}

/// Example dialogs, then the current history, ending with `\n` after the
/// last user utterance so the completion is the next system turn.
pub fn build_policy_prompt(examples: &[DialogExample], history: &[Turn]) -> Result<String, PromptError> {
    if history.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    if examples.len() != POLICY_EXAMPLES {
        return Err(PromptError::BadExampleCount { found: examples.len() });
    }
    let mut blocks: Vec<String> = examples.iter().map(|d| lines(&d.turns)).collect();
    blocks.push(lines(history));
    let mut prompt = blocks.join("\n\n");
    prompt.push('\n');
    Ok(prompt)
}

/// `query\nknowledge` pairs, then the query to complete.
pub fn build_kb_prompt(examples: &[KbPair], query: &str) -> Result<String, PromptError> {
    let query = collapse_ws(query);
    if query.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    if examples.is_empty() {
        return Err(PromptError::NoExamples);
    }
    let mut blocks: Vec<String> = examples
        .iter()
        .map(|p| format!("{}\n{}", collapse_ws(&p.query), collapse_ws(&p.knowledge)))
        .collect();
    blocks.push(query);
    let mut prompt = blocks.join("\n\n");
    prompt.push('\n');
    Ok(prompt)
}
