//! Dataset file IO, statistics, answerable/unanswerable subset expansion and
//! emission of training pairs and augmentation prompts.
//!
//! File schema:
//!
//! ```json
//! {"splits": {"train": [dialog...], "validation": [...], "test": [...]},
//!  "vocabulary": {"domains": [...], "slots": {"<domain>": [...]}},
//!  "database": "db.json"}
//! ```
//!
//! A dialog is `{"dialog_id", "goal": {"constraints", "requests"}, "turns"}`
//! and a turn is `{"role", "text", "annotation"}`; see [`crate::dialog`].

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::{DialogExample, QuestionType, Turn};
use crate::knowledge::{build_kb_prompt, build_policy_prompt, query_database, render_db_state, EntityDatabase,
    InContextExamples, PromptError};
use crate::policy::{build_history_window, response_input, state_input, PolicyError, WindowConfig};
use crate::state::{serialize_state, BeliefState, KnowledgeSource, State, Vocabulary};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("dialog {dialog_id}{}: {message}", turn.map(|t| format!(" turn {t}")).unwrap_or_default())]
    InvariantViolation { dialog_id: String, turn: Option<usize>, message: String },
    #[error("dialog {dialog_id} turn {turn}: missing {what}")]
    MissingAnnotation { dialog_id: String, turn: usize, what: &'static str },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<DialogExample>,
    #[serde(default)]
    pub validation: Vec<DialogExample>,
    #[serde(default)]
    pub test: Vec<DialogExample>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
    /// Entity database file, relative to the dataset file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub database: Option<PathBuf>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[DialogExample] {
        match split {
            Split::Train => &self.splits.train,
            Split::Validation => &self.splits.validation,
            Split::Test => &self.splits.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<DialogExample> {
        match split {
            Split::Train => &mut self.splits.train,
            Split::Validation => &mut self.splits.validation,
            Split::Test => &mut self.splits.test,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.vocabulary.clone().unwrap_or_default()
    }

    /// Checks every dialog; the first violation is returned.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let vocab = self.vocabulary();
        for split in Split::ALL {
            let mut seen = HashSet::new();
            for dialog in self.split(split) {
                let violation = |turn, message: String| DatasetError::InvariantViolation {
                    dialog_id: dialog.dialog_id.clone(),
                    turn,
                    message,
                };
                if !seen.insert(dialog.dialog_id.as_str()) {
                    return Err(violation(None, format!("duplicate dialog_id in {}", split.as_str())));
                }
                dialog.check().map_err(|(turn, m)| violation(turn, m))?;
                for (i, turn) in dialog.turns.iter().enumerate() {
                    let Some(ann) = &turn.annotation else { continue };
                    if let Some(belief) = ann.gold_state.as_ref().and_then(State::belief) {
                        if let Some(b) = belief.blocks.iter().find(|b| !vocab.is_domain(&b.domain)) {
                            return Err(violation(Some(i), format!("unknown domain '{}'", b.domain)));
                        }
                    }
                    if turn.qa().is_some() && ann.query().is_none_or(|q| crate::eval::tokenize(q).is_empty()) {
                        return Err(violation(Some(i), "QA turn has no gold query".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let ds: Dataset = serde_json::from_str(text).map_err(|e| DatasetError::Schema(e.to_string()))?;
    ds.validate()?;
    Ok(ds)
}

/// Loads and validates a dataset file. A relative `database` path is
/// resolved against the file's directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))?;
    let mut ds = parse_dataset(&text)?;
    if let Some(db) = ds.database.as_mut().filter(|p| p.is_relative()) {
        *db = path.parent().unwrap_or(Path::new(".")).join(&*db);
    }
    Ok(ds)
}

pub fn dataset_to_json(ds: &Dataset) -> String {
    serde_json::to_string_pretty(ds).expect("dataset serializes") + "\n"
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_json(ds)).map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub n_dialogs: usize,
    pub n_tod_turns: usize,
    pub n_answerable: usize,
    pub n_unanswerable: usize,
}

impl SplitStats {
    fn add(&mut self, other: &SplitStats) {
        self.n_dialogs += other.n_dialogs;
        self.n_tod_turns += other.n_tod_turns;
        self.n_answerable += other.n_answerable;
        self.n_unanswerable += other.n_unanswerable;
    }
}

/// Mean whitespace-token lengths; `None` where nothing was annotated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLengths {
    pub query: Option<f64>,
    pub knowledge: Option<f64>,
    pub response: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub splits: BTreeMap<Split, SplitStats>,
    pub total: SplitStats,
    pub lengths: BTreeMap<QuestionType, TokenLengths>,
}

impl DatasetStats {
    pub fn table(&self) -> String {
        let mut out = format!("{:<12}{:>9}{:>11}{:>12}{:>14}\n", "split", "dialogs", "TOD turns", "answerable", "unanswerable");
        let rows = self.splits.iter().map(|(s, v)| (s.as_str(), v)).chain([("total", &self.total)]);
        for (name, s) in rows {
            out.push_str(&format!(
                "{name:<12}{:>9}{:>11}{:>12}{:>14}\n",
                s.n_dialogs, s.n_tod_turns, s.n_answerable, s.n_unanswerable
            ));
        }
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        out.push_str(&format!("\n{:<14}{:>8}{:>11}{:>10}\n", "type", "query", "knowledge", "response"));
        for (qt, l) in &self.lengths {
            let name = format!("{qt:?}").to_lowercase();
            out.push_str(&format!("{name:<14}{:>8}{:>11}{:>10}\n", f(l.query), f(l.knowledge), f(l.response)));
        }
        out
    }
}

pub fn split_stats(dialogs: &[DialogExample]) -> SplitStats {
    let mut s = SplitStats { n_dialogs: dialogs.len(), ..SplitStats::default() };
    for ex in dialogs.iter().flat_map(DialogExample::exchanges) {
        match ex.qa().and_then(|a| a.question_type) {
            Some(QuestionType::Answerable) => s.n_answerable += 1,
            Some(QuestionType::Unanswerable) => s.n_unanswerable += 1,
            None => s.n_tod_turns += 1,
        }
    }
    s
}

fn mean_len<'a>(texts: impl Iterator<Item = &'a str>) -> Option<f64> {
    let lens: Vec<usize> = texts.map(|t| t.split_whitespace().count()).collect();
    (!lens.is_empty()).then(|| lens.iter().sum::<usize>() as f64 / lens.len() as f64)
}

/// Counts per split and in total, and mean token lengths of the QA turns'
/// query, knowledge and response by question type.
pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for split in Split::ALL {
        let s = split_stats(ds.split(split));
        stats.total.add(&s);
        stats.splits.insert(split, s);
    }
    for qt in [QuestionType::Answerable, QuestionType::Unanswerable] {
        let qa: Vec<_> = Split::ALL
            .iter()
            .flat_map(|s| ds.split(*s))
            .flat_map(DialogExample::exchanges)
            .filter_map(|ex| ex.qa().filter(|a| a.question_type == Some(qt)).map(|a| (a, ex.system)))
            .collect();
        fn knowledge(qt: QuestionType, a: &crate::dialog::TurnAnnotation) -> Option<&str> {
            match qt {
            QuestionType::Answerable => a.selected_knowledge.as_deref(),
            QuestionType::Unanswerable => a.implicit_knowledge.as_deref(),
            }
        }
        stats.lengths.insert(
            qt,
            TokenLengths {
                query: mean_len(qa.iter().filter_map(|(a, _)| a.query())),
                knowledge: mean_len(qa.iter().filter_map(|(a, _)| knowledge(qt, a))),
                response: mean_len(qa.iter().map(|(_, s)| s.text.as_str())),
            },
        );
    }
    stats
}

/// A subset copy of a dataset dialog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedDialog {
    pub dialog: DialogExample,
    pub origin_id: String,
    /// Original turn index of each kept turn.
    pub kept_turns: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Expansion {
    pub answerable: Vec<ExpandedDialog>,
    pub unanswerable: Vec<ExpandedDialog>,
}

/// Copy of `dialog` without the QA exchanges whose question type is not `keep`.
fn keep_only(dialog: &DialogExample, keep: QuestionType, suffix: &str) -> ExpandedDialog {
    let mut drop = HashSet::new();
    for ex in dialog.exchanges() {
        if ex.qa().is_some_and(|a| a.question_type != Some(keep)) {
            drop.insert(ex.user_index);
            drop.insert(ex.system_index);
        }
    }
    let kept_turns: Vec<usize> = (0..dialog.turns.len()).filter(|i| !drop.contains(i)).collect();
    ExpandedDialog {
        dialog: DialogExample {
            dialog_id: format!("{}{suffix}", dialog.dialog_id),
            goal: dialog.goal.clone(),
            turns: kept_turns.iter().map(|&i| dialog.turns[i].clone()).collect(),
        },
        origin_id: dialog.dialog_id.clone(),
        kept_turns,
    }
}

/// Splits dialogs by the question types of their QA turns. A dialog with
/// both types yields one copy per type; one without QA turns yields none.
pub fn expand_by_question_type(dialogs: &[DialogExample]) -> Expansion {
    let mut out = Expansion::default();
    for dialog in dialogs {
        let types: HashSet<QuestionType> = dialog.qa_turns().filter_map(|a| a.question_type).collect();
        if types.contains(&QuestionType::Answerable) {
            out.answerable.push(keep_only(dialog, QuestionType::Answerable, "-ans"));
        }
        if types.contains(&QuestionType::Unanswerable) {
            out.unanswerable.push(keep_only(dialog, QuestionType::Unanswerable, "-unans"));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    StatePrediction,
    ResponseGeneration,
}

/// What a training regime lets the model see of the QA turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// TOD turns only; QA exchanges are removed from the dialogs.
    #[serde(rename = "T")]
    Tod,
    /// QA turns in the histories, their queries and knowledge hidden.
    #[serde(rename = "T+Q")]
    TodQa,
    /// As `TodQa`, plus queries and explicit knowledge for answerable turns.
    #[serde(rename = "T+Q-EK")]
    ExplicitKnowledge,
    /// Explicit knowledge plus implicit knowledge from policy-model prompting.
    #[serde(rename = "PM")]
    PolicyModel,
    /// Explicit knowledge plus implicit knowledge from knowledge-base prompting.
    #[serde(rename = "KB")]
    KnowledgeBase,
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown regime '{s}' (expected T, T+Q, T+Q-EK, PM or KB)"))
    }
}

impl Regime {
    fn shows(self, qt: QuestionType) -> bool {
        match (self, qt) {
            (Regime::Tod | Regime::TodQa, _) => false,
            (_, QuestionType::Answerable) => true,
            (Regime::PolicyModel | Regime::KnowledgeBase, QuestionType::Unanswerable) => true,
            (Regime::ExplicitKnowledge, QuestionType::Unanswerable) => false,
        }
    }
}

/// State target for a QA turn whose query the regime hides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenTarget {
    /// The most recent gold database state before the turn.
    #[default]
    PreviousBelief,
    /// No training pair for the turn; it stays in later histories.
    Skip,
}

#[derive(Clone, Debug, Default)]
pub struct EmitConfig {
    pub window: WindowConfig,
    pub hidden: HiddenTarget,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub input: String,
    pub target: String,
}

fn db_knowledge(db: &EntityDatabase, belief: &BeliefState) -> String {
    let known = BeliefState { blocks: belief.blocks.iter().filter(|b| db.has_domain(&b.domain)).cloned().collect() };
    query_database(db, &known).map(|m| render_db_state(&m)).unwrap_or_else(|_| "matched = 0".to_string())
}

/// Training pairs for one task under one regime, one per included system turn.
pub fn emit_training_examples(
    dialogs: &[DialogExample],
    db: &EntityDatabase,
    task: Task,
    regime: Regime,
    cfg: &EmitConfig,
) -> Result<Vec<TrainingPair>, DatasetError> {
    let mut out = Vec::new();
    for original in dialogs {
        let dialog = if regime == Regime::Tod {
            let mut d = keep_only(original, QuestionType::Answerable, "").dialog;
            d = keep_only(&d, QuestionType::Unanswerable, "").dialog;
            d.dialog_id = original.dialog_id.clone();
            d
        } else {
            original.clone()
        };
        let mut previous = BeliefState::default();
        for ex in dialog.exchanges() {
            let missing = |what| DatasetError::MissingAnnotation {
                dialog_id: dialog.dialog_id.clone(),
                turn: ex.user_index,
                what,
            };
            let (state, knowledge) = match ex.qa() {
                None => {
                    let state = ex.gold_state().cloned().ok_or_else(|| missing("gold_state"))?;
                    let belief = state.belief().cloned().unwrap_or_default();
                    let knowledge = db_knowledge(db, &belief);
                    if state.source() == KnowledgeSource::Database {
                        previous = belief;
                    }
                    (state, knowledge)
                }
                Some(ann) => {
                    let qt = ann.question_type.ok_or_else(|| missing("question_type"))?;
                    if regime.shows(qt) {
                        let state = ann.gold_state.clone().ok_or_else(|| missing("gold_state"))?;
                        let knowledge = match qt {
                            QuestionType::Answerable => ann.selected_knowledge.clone(),
                            QuestionType::Unanswerable => ann.implicit_knowledge.clone(),
                        };
                        (state, knowledge.ok_or_else(|| missing("knowledge"))?)
                    } else if cfg.hidden == HiddenTarget::Skip {
                        continue;
                    } else {
                        (State::database(previous.clone()), db_knowledge(db, &previous))
                    }
                }
            };
            let window = build_history_window(&dialog.turns[..=ex.user_index], &cfg.window)?;
            out.push(match task {
                Task::StatePrediction => {
                    TrainingPair { input: state_input(&window, &cfg.window), target: serialize_state(&state) }
                }
                Task::ResponseGeneration => TrainingPair {
                    input: response_input(&window, &knowledge, &cfg.window),
                    target: ex.reference().to_string(),
                },
            });
        }
    }
    Ok(out)
}

/// Escapes `\`, tab, newline and carriage return so a field stays on one line.
pub fn escape_tsv(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_tsv(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

pub fn write_tsv(pairs: &[TrainingPair], mut w: impl Write) -> std::io::Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}", escape_tsv(&p.input), escape_tsv(&p.target))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    PolicyModel,
    KnowledgeBase,
}

impl std::str::FromStr for AugmentMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "policy_model" | "pm" => Ok(AugmentMethod::PolicyModel),
            "knowledge_base" | "kb" => Ok(AugmentMethod::KnowledgeBase),
            other => Err(format!("unknown method '{other}' (expected policy_model or knowledge_base)")),
        }
    }
}

/// A prompt for one unanswerable QA turn, keyed by its user turn index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPrompt {
    pub dialog_id: String,
    pub turn_index: usize,
    pub prompt: String,
}

pub fn emit_augmentation_prompts(
    dialogs: &[DialogExample],
    method: AugmentMethod,
    examples: &InContextExamples,
) -> Result<Vec<AugmentationPrompt>, DatasetError> {
    let mut out = Vec::new();
    for dialog in dialogs {
        for (i, turn) in dialog.turns.iter().enumerate() {
            let Some(ann) = turn.qa().filter(|a| a.question_type == Some(QuestionType::Unanswerable)) else {
                continue;
            };
            let prompt = match method {
                AugmentMethod::PolicyModel => build_policy_prompt(&examples.policy_dialogs, &dialog.turns[..=i])?,
                AugmentMethod::KnowledgeBase => {
                    let query = ann.query().ok_or_else(|| DatasetError::MissingAnnotation {
                        dialog_id: dialog.dialog_id.clone(),
                        turn: i,
                        what: "gold_query",
                    })?;
                    build_kb_prompt(&examples.kb_pairs, query)?
                }
            };
            out.push(AugmentationPrompt { dialog_id: dialog.dialog_id.clone(), turn_index: i, prompt });
        }
    }
    Ok(out)
}

/// An offline completion for an [`AugmentationPrompt`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub dialog_id: String,
    pub turn_index: usize,
    pub text: String,
}

/// Stores completions as the implicit knowledge of their QA turns. Returns
/// the number of turns updated.
pub fn merge_implicit(dialogs: &mut [DialogExample], completions: &[Completion]) -> Result<usize, DatasetError> {
    for c in completions {
        let dialog = dialogs.iter_mut().find(|d| d.dialog_id == c.dialog_id).ok_or_else(|| {
            DatasetError::InvariantViolation {
                dialog_id: c.dialog_id.clone(),
                turn: None,
                message: "completion for an unknown dialog".into(),
            }
        })?;
        let ann = dialog
            .turns
            .get_mut(c.turn_index)
            .filter(|t| t.qa().is_some_and(|a| a.question_type == Some(QuestionType::Unanswerable)))
            .and_then(|t: &mut Turn| t.annotation.as_mut())
            .ok_or_else(|| DatasetError::InvariantViolation {
                dialog_id: c.dialog_id.clone(),
                turn: Some(c.turn_index),
                message: "completion does not target an unanswerable QA turn".into(),
            })?;
        ann.implicit_knowledge = Some(c.text.trim().to_string());
    }
    Ok(completions.len())
}
