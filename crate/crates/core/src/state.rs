//! The routing state emitted by state prediction.
//!
//! Surface forms:
//!
//! ```text
//! Database: restaurant pricerange = expensive food = chinese area = north
//! Dataset: taxi destination = the cow pizza kitchen and bar ; departure = el shaddai
//! Explicit: cancel taxi booking extra charge
//! Implicit: credit cards acceptance in alimentum restaurant
//! ```
//!
//! `Dataset:` is accepted as an input alias of `Database:`. Belief pairs may
//! be `;`-separated or juxtaposed; output always uses ` ; `.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which knowledge source a state routes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSource {
    Database,
    Explicit,
    Implicit,
}

impl KnowledgeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeSource::Database => "database",
            KnowledgeSource::Explicit => "explicit",
            KnowledgeSource::Implicit => "implicit",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            KnowledgeSource::Database => "Database:",
            KnowledgeSource::Explicit => "Explicit:",
            KnowledgeSource::Implicit => "Implicit:",
        }
    }
}

impl fmt::Display for KnowledgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KnowledgeSource {
    type Err = StateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "database" | "dataset" => Ok(KnowledgeSource::Database),
            "explicit" => Ok(KnowledgeSource::Explicit),
            "implicit" => Ok(KnowledgeSource::Implicit),
            _ => Err(StateError::UnknownPrefix),
        }
    }
}

/// A routing decision: a belief state for the database, or a query for an
/// external source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum State {
    Database { belief: BeliefState },
    Explicit { query: String },
    Implicit { query: String },
}

impl State {
    pub fn database(belief: BeliefState) -> Self {
        State::Database { belief }
    }

    /// Builds a query state. The query is trimmed and must not be blank.
    pub fn with_query(source: KnowledgeSource, query: &str) -> Result<Self, StateError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(StateError::EmptyPayload { kind: source });
        }
        match source {
            KnowledgeSource::Explicit => Ok(State::Explicit { query: query.to_string() }),
            KnowledgeSource::Implicit => Ok(State::Implicit { query: query.to_string() }),
            KnowledgeSource::Database => Err(StateError::NotAQuerySource),
        }
    }

    pub fn source(&self) -> KnowledgeSource {
        match self {
            State::Database { .. } => KnowledgeSource::Database,
            State::Explicit { .. } => KnowledgeSource::Explicit,
            State::Implicit { .. } => KnowledgeSource::Implicit,
        }
    }

    pub fn query(&self) -> Option<&str> {
        match self {
            State::Explicit { query } | State::Implicit { query } => Some(query),
            State::Database { .. } => None,
        }
    }

    pub fn belief(&self) -> Option<&BeliefState> {
        match self {
            State::Database { belief } => Some(belief),
            _ => None,
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_state(self))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefState {
    pub blocks: Vec<BeliefBlock>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefBlock {
    pub domain: String,
    #[serde(default)]
    pub slots: Vec<SlotValue>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotValue {
    pub slot: String,
    pub value: String,
}

impl BeliefState {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, domain: &str) -> Option<&BeliefBlock> {
        self.blocks.iter().find(|b| b.domain == domain)
    }
}

impl BeliefBlock {
    pub fn new(domain: impl Into<String>) -> Self {
        Self { domain: domain.into(), slots: Vec::new() }
    }

    pub fn with(mut self, slot: impl Into<String>, value: impl Into<String>) -> Self {
        self.slots.push(SlotValue { slot: slot.into(), value: value.into() });
        self
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.slots.iter().find(|s| s.slot == slot).map(|s| s.value.as_str())
    }
}

/// Domain and slot vocabularies the belief grammar is parsed against.
///
/// A domain with no slot entry accepts any slot name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub domains: BTreeSet<String>,
    #[serde(default)]
    pub slots: BTreeMap<String, BTreeSet<String>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::multiwoz()
    }
}

impl Vocabulary {
    pub fn new<I, S>(domains: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            domains: domains.into_iter().map(Into::into).collect(),
            slots: BTreeMap::new(),
        }
    }

    pub fn with_slots<I, S>(mut self, domain: &str, slots: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.domains.insert(domain.to_string());
        self.slots
            .insert(domain.to_string(), slots.into_iter().map(Into::into).collect());
        self
    }

    /// The seven MultiWOZ 2.1 domains with their informable slots.
    pub fn multiwoz() -> Self {
        Self::new(Vec::<String>::new())
            .with_slots(
                "restaurant",
                ["area", "day", "food", "name", "people", "pricerange", "time"],
            )
            .with_slots(
                "hotel",
                ["area", "day", "internet", "name", "parking", "people", "pricerange", "stars", "stay", "type"],
            )
            .with_slots("train", ["arriveby", "day", "departure", "destination", "leaveat", "people"])
            .with_slots("taxi", ["arriveby", "departure", "destination", "leaveat"])
            .with_slots("attraction", ["area", "name", "type"])
            .with_slots("hospital", ["department"])
            .with_slots("police", ["name"])
    }

    pub fn is_domain(&self, word: &str) -> bool {
        self.domains.contains(word)
    }

    pub fn is_slot(&self, domain: &str, word: &str) -> bool {
        match self.slots.get(domain) {
            Some(slots) => slots.contains(word),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("state text is empty")]
    EmptyInput,
    #[error("state has no recognized knowledge-source prefix")]
    UnknownPrefix,
    #[error("{kind} state has an empty payload")]
    EmptyPayload { kind: KnowledgeSource },
    #[error("the database source takes a belief state, not a query")]
    NotAQuerySource,
    #[error(transparent)]
    Belief(#[from] BeliefParseError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("belief parse error at byte {offset}: {message}")]
pub struct BeliefParseError {
    pub offset: usize,
    pub message: String,
}

impl BeliefParseError {
    fn at(offset: usize, message: impl Into<String>) -> Self {
        Self { offset, message: message.into() }
    }
}

/// Parses a predicted state string.
pub fn parse_state(text: &str, vocab: &Vocabulary) -> Result<State, StateError> {
    let lead = text.len() - text.trim_start().len();
    let body = &text[lead..];
    if body.trim().is_empty() {
        return Err(StateError::EmptyInput);
    }
    let colon = body.find(':').ok_or(StateError::UnknownPrefix)?;
    let source: KnowledgeSource = body[..colon].parse()?;
    let rest = &body[colon + 1..];
    if rest.trim().is_empty() {
        return Err(StateError::EmptyPayload { kind: source });
    }
    match source {
        KnowledgeSource::Database => {
            let base = lead + colon + 1;
            let belief = parse_belief(rest, vocab).map_err(|mut e| {
                e.offset += base;
                e
            })?;
            Ok(State::Database { belief })
        }
        _ => State::with_query(source, rest),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Tok<'a> {
    Word(&'a str),
    Eq,
    Semi,
}

fn lex(text: &str) -> Vec<(usize, Tok<'_>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let delim = c.is_whitespace() || c == '=' || c == ';';
        if delim {
            if let Some(s) = start.take() {
                out.push((s, Tok::Word(&text[s..i])));
            }
            match c {
                '=' => out.push((i, Tok::Eq)),
                ';' => out.push((i, Tok::Semi)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, Tok::Word(&text[s..])));
    }
    out
}

/// Parses a belief state: domain blocks of `slot = value` pairs.
///
/// A value runs until `;`, the end of input, a slot of the current domain
/// followed by `=`, or a domain word followed by one of its own slots and
/// `=`. Everything is lowercased.
pub fn parse_belief(text: &str, vocab: &Vocabulary) -> Result<BeliefState, BeliefParseError> {
    let lower = text.to_lowercase();
    // Lowercasing can change byte lengths for some scripts; offsets are then
    // reported against the lowercased text, which is identical for ASCII.
    let toks = lex(&lower);
    if toks.is_empty() {
        return Err(BeliefParseError::at(0, "empty belief state"));
    }

    let word_at = |i: usize| match toks.get(i) {
        Some((_, Tok::Word(w))) => Some(*w),
        _ => None,
    };
    let eq_at = |i: usize| matches!(toks.get(i), Some((_, Tok::Eq)));
    let starts_pair = |domain: &str, i: usize| {
        word_at(i).is_some_and(|w| vocab.is_slot(domain, w)) && eq_at(i + 1)
    };
    let starts_block = |i: usize| {
        word_at(i).is_some_and(|w| vocab.is_domain(w) && starts_pair(w, i + 1))
    };

    let mut belief = BeliefState::default();

    // Leading block.
    match toks[0] {
        (_, Tok::Word(w)) if vocab.is_domain(w) => belief.blocks.push(BeliefBlock::new(w)),
        (off, _) => return Err(BeliefParseError::at(off, "expected a domain name")),
    }
    let mut i = 1;

    while i < toks.len() {
        let domain = belief.blocks.last().map(|b| b.domain.clone()).unwrap_or_default();
        let (off, tok) = toks[i];
        match tok {
            Tok::Semi => i += 1,
            Tok::Word(w) if starts_pair(&domain, i) => {
                let slot = w.to_string();
                let slot_off = off;
                i += 2;
                let mut value: Vec<&str> = Vec::new();
                while i < toks.len() {
                    match toks[i].1 {
                        Tok::Word(_) if !value.is_empty() && (starts_pair(&domain, i) || starts_block(i)) => break,
                        Tok::Word(v) => {
                            value.push(v);
                            i += 1;
                        }
                        Tok::Semi => break,
                        Tok::Eq => return Err(BeliefParseError::at(toks[i].0, "unexpected '='")),
                    }
                }
                if value.is_empty() {
                    let at = toks.get(i).map_or(lower.len(), |t| t.0);
                    return Err(BeliefParseError::at(at, format!("missing value for slot '{slot}'")));
                }
                let block = belief.blocks.last_mut().expect("block opened above");
                if block.get(&slot).is_some() {
                    return Err(BeliefParseError::at(slot_off, format!("duplicate slot '{slot}' in {domain}")));
                }
                block.slots.push(SlotValue { slot, value: value.join(" ") });
            }
            Tok::Word(w) if vocab.is_domain(w) => {
                belief.blocks.push(BeliefBlock::new(w));
                i += 1;
            }
            Tok::Word(w) => {
                return Err(BeliefParseError::at(
                    off,
                    format!("'{w}' is neither a slot of {domain} nor a domain"),
                ))
            }
            Tok::Eq => return Err(BeliefParseError::at(off, "unexpected '='")),
        }
    }
    Ok(belief)
}

/// Canonical surface form of a state.
pub fn serialize_state(state: &State) -> String {
    match state {
        State::Database { belief } => {
            let body = serialize_belief(belief);
            if body.is_empty() {
                KnowledgeSource::Database.prefix().to_string()
            } else {
                format!("{} {body}", KnowledgeSource::Database.prefix())
            }
        }
        State::Explicit { query } => format!("{} {query}", KnowledgeSource::Explicit.prefix()),
        State::Implicit { query } => format!("{} {query}", KnowledgeSource::Implicit.prefix()),
    }
}

pub fn serialize_belief(belief: &BeliefState) -> String {
    belief
        .blocks
        .iter()
        .map(|block| {
            if block.slots.is_empty() {
                block.domain.clone()
            } else {
                let pairs = block
                    .slots
                    .iter()
                    .map(|p| format!("{} = {}", p.slot, p.value))
                    .collect::<Vec<_>>()
                    .join(" ; ");
                format!("{} {pairs}", block.domain)
            }
        })
        .collect::<Vec<_>>()
        .join(" ; ")
}
