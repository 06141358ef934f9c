//! Dialog domain types: turns, annotations, annotated dialogs and live sessions.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::TurnResult;
use crate::state::{KnowledgeSource, State};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::System => "system",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnKind {
    Tod,
    Qa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Answerable,
    Unanswerable,
}

impl QuestionType {
    /// The knowledge source a correct prediction routes to.
    pub fn gold_source(self) -> KnowledgeSource {
        match self {
            QuestionType::Answerable => KnowledgeSource::Explicit,
            QuestionType::Unanswerable => KnowledgeSource::Implicit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnAnnotation {
    pub turn_kind: TurnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<QuestionType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_state: Option<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implicit_knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delexicalized_response: Option<String>,
}

impl TurnAnnotation {
    pub fn tod(gold_state: State) -> Self {
        Self {
            turn_kind: TurnKind::Tod,
            question_type: None,
            gold_state: Some(gold_state),
            gold_query: None,
            selected_knowledge: None,
            implicit_knowledge: None,
            delexicalized_response: None,
        }
    }

    pub fn is_qa(&self) -> bool {
        self.turn_kind == TurnKind::Qa
    }

    /// The annotated search query: `gold_query`, else the gold state's query.
    pub fn query(&self) -> Option<&str> {
        self.gold_query
            .as_deref()
            .or_else(|| self.gold_state.as_ref().and_then(State::query))
    }

    /// Checks the annotation's own invariants; returns a message on failure.
    pub fn check(&self) -> Result<(), String> {
        match (self.turn_kind, self.question_type) {
            (TurnKind::Tod, Some(_)) => return Err("question_type on a TOD annotation".into()),
            (TurnKind::Qa, None) => return Err("QA annotation without question_type".into()),
            _ => {}
        }
        let source = self.gold_state.as_ref().map(State::source);
        match self.question_type {
            Some(QuestionType::Answerable) => {
                if source != Some(KnowledgeSource::Explicit) {
                    return Err("answerable question must have an explicit gold_state".into());
                }
                if self.selected_knowledge.as_deref().is_none_or(|k| k.trim().is_empty()) {
                    return Err("answerable question is missing selected_knowledge".into());
                }
            }
            Some(QuestionType::Unanswerable) => {
                if source != Some(KnowledgeSource::Implicit) {
                    return Err("unanswerable question must have an implicit gold_state".into());
                }
            }
            None => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<TurnAnnotation>,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Result<Self, DialogError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DialogError::EmptyUtterance);
        }
        Ok(Self { role, text, annotation: None })
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text).expect("non-empty user text")
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, text).expect("non-empty system text")
    }

    pub fn annotated(mut self, annotation: TurnAnnotation) -> Self {
        self.annotation = Some(annotation);
        self
    }

    /// The QA annotation, if this is an inserted knowledge-seeking user turn.
    pub fn qa(&self) -> Option<&TurnAnnotation> {
        self.annotation.as_ref().filter(|a| a.is_qa() && self.role == Role::User)
    }
}

/// Per-domain user goal: informable constraints and requested slots.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalAnnotation {
    #[serde(default)]
    pub constraints: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub requests: BTreeMap<String, BTreeSet<String>>,
}

impl GoalAnnotation {
    pub fn is_empty(&self) -> bool {
        self.constraints.values().all(BTreeMap::is_empty) && self.requests.values().all(BTreeSet::is_empty)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.constraints.keys().chain(self.requests.keys()).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogExample {
    pub dialog_id: String,
    #[serde(default)]
    pub goal: GoalAnnotation,
    pub turns: Vec<Turn>,
}

/// A user turn paired with the system turn that answers it.
#[derive(Clone, Copy, Debug)]
pub struct Exchange<'a> {
    pub user_index: usize,
    pub system_index: usize,
    pub user: &'a Turn,
    pub system: &'a Turn,
}

impl<'a> Exchange<'a> {
    pub fn qa(&self) -> Option<&'a TurnAnnotation> {
        self.user.qa()
    }

    pub fn is_qa(&self) -> bool {
        self.qa().is_some()
    }

    /// Gold state: from the QA annotation, else from the system turn.
    pub fn gold_state(&self) -> Option<&'a State> {
        match self.qa() {
            Some(a) => a.gold_state.as_ref(),
            None => self.system.annotation.as_ref().and_then(|a| a.gold_state.as_ref()),
        }
    }

    /// Reference response used for BLEU: the delexicalized form when present.
    pub fn reference(&self) -> &'a str {
        self.system
            .annotation
            .as_ref()
            .and_then(|a| a.delexicalized_response.as_deref())
            .unwrap_or(&self.system.text)
    }
}

impl DialogExample {
    /// Every user turn followed by a system turn, in order.
    pub fn exchanges(&self) -> impl Iterator<Item = Exchange<'_>> {
        self.turns.windows(2).enumerate().filter_map(|(i, pair)| {
            (pair[0].role == Role::User && pair[1].role == Role::System).then_some(Exchange {
                user_index: i,
                system_index: i + 1,
                user: &pair[0],
                system: &pair[1],
            })
        })
    }

    pub fn qa_turns(&self) -> impl Iterator<Item = &TurnAnnotation> {
        self.turns.iter().filter_map(Turn::qa)
    }

    pub fn has_qa(&self) -> bool {
        self.qa_turns().next().is_some()
    }

    pub fn system_turn_count(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::System).count()
    }

    /// Checks alternation, non-empty text and annotation placement.
    /// Errors carry the offending turn index.
    pub fn check(&self) -> Result<(), (Option<usize>, String)> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::System };
            if turn.role != expected {
                return Err((Some(i), format!("expected a {} turn", expected.as_str())));
            }
            if turn.text.trim().is_empty() {
                return Err((Some(i), "empty utterance".into()));
            }
            if let Some(a) = &turn.annotation {
                if turn.role == Role::User && !a.is_qa() {
                    return Err((Some(i), "only inserted QA user turns carry annotations".into()));
                }
                a.check().map_err(|m| (Some(i), m))?;
                if turn.role == Role::User && self.turns.get(i + 1).is_none() {
                    return Err((Some(i), "QA turn has no system response".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DialogError {
    #[error("expected a {expected} turn next")]
    AlternationViolation { expected: &'static str },
    #[error("utterance is empty")]
    EmptyUtterance,
}

/// A live conversation with the engine and its per-turn trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub turns: Vec<Turn>,
    pub trace: Vec<TurnResult>,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self::with_time(session_id, Utc::now())
    }

    pub fn with_time(session_id: impl Into<String>, created_at: DateTime<Utc>) -> Self {
        Self { session_id: session_id.into(), created_at, turns: Vec::new(), trace: Vec::new() }
    }

    pub fn next_role(&self) -> Role {
        match self.turns.last() {
            Some(t) if t.role == Role::User => Role::System,
            _ => Role::User,
        }
    }
}

/// Returns a copy of `session` with one more turn.
pub fn append_turn(session: &Session, role: Role, text: &str) -> Result<Session, DialogError> {
    let expected = session.next_role();
    if role != expected {
        return Err(DialogError::AlternationViolation { expected: expected.as_str() });
    }
    let turn = Turn::new(role, text)?;
    let mut next = session.clone();
    next.turns.push(turn);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn append_first_user_turn() {
        let s = Session::new("s");
        let s = append_turn(&s, Role::User, "I need a train leaving on Friday.").unwrap();
        assert_eq!(s.turns.len(), 1);
    }

    #[test]
    fn alternation_is_enforced() {
        let s = append_turn(&Session::new("s"), Role::User, "hello").unwrap();
        assert_eq!(
            append_turn(&s, Role::User, "hi"),
            Err(DialogError::AlternationViolation { expected: "system" })
        );
        assert!(append_turn(&Session::new("s"), Role::System, "hello").is_err());
    }

    #[test]
    fn blank_text_rejected() {
        let s = append_turn(&Session::new("s"), Role::User, "hello").unwrap();
        assert_eq!(append_turn(&s, Role::System, "   "), Err(DialogError::EmptyUtterance));
    }

    #[test]
    fn annotation_invariants() {
        let mut a = TurnAnnotation::tod(State::database(Default::default()));
        assert!(a.check().is_ok());
        a.turn_kind = TurnKind::Qa;
        assert!(a.check().is_err());
        a.question_type = Some(QuestionType::Unanswerable);
        assert!(a.check().is_err());
        a.gold_state = Some(State::with_query(KnowledgeSource::Implicit, "q").unwrap());
        assert!(a.check().is_ok());
        a.question_type = Some(QuestionType::Answerable);
        a.gold_state = Some(State::with_query(KnowledgeSource::Explicit, "q").unwrap());
        assert!(a.check().unwrap_err().contains("selected_knowledge"));
        a.selected_knowledge = Some("k".into());
        assert!(a.check().is_ok());
    }

    #[test]
    fn dialog_must_start_with_user() {
        let d = DialogExample {
            dialog_id: "d".into(),
            goal: GoalAnnotation::default(),
            turns: vec![Turn::system("hi"), Turn::user("hello")],
        };
        assert_eq!(d.check().unwrap_err().0, Some(0));
    }

    proptest! {
        #[test]
        fn alternation_and_prefix_preserved(roles in prop::collection::vec(any::<bool>(), 0..20)) {
            let mut session = Session::new("p");
            for user in roles {
                let role = if user { Role::User } else { Role::System };
                let before = serde_json::to_string(&session.turns).unwrap();
                match append_turn(&session, role, "text") {
                    Ok(next) => {
                        let prefix = serde_json::to_string(&next.turns[..session.turns.len()]).unwrap();
                        prop_assert_eq!(prefix, before);
                        session = next;
                    }
                    Err(_) => prop_assert_ne!(role, session.next_role()),
                }
            }
            for (i, t) in session.turns.iter().enumerate() {
                prop_assert_eq!(t.role, if i % 2 == 0 { Role::User } else { Role::System });
            }
        }
    }
}
