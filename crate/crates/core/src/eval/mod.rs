//! Metric suite: BLEU, Inform, Success and Combined for task completion;
//! knowledge-source Accuracy, Query F1 and Success Rate for QA turns.
//!
//! Metrics are generic over [`Scalar`]; the counting metrics can be computed
//! exactly in [`crate::Exact`].

mod bleu;
mod inform;
mod qa;
mod scalar;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{corpus_bleu, MAX_ORDER};
pub use inform::{inform_success, InformSuccess};
pub use qa::{qa_success_rate, query_f1, source_accuracy, SUCCESS_THRESHOLD};
pub use scalar::Scalar;

use crate::dataset::{expand_by_question_type, ExpandedDialog};
use crate::dialog::DialogExample;
use crate::knowledge::EntityDatabase;
use crate::state::State;

const STRIP: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')'];

/// Metric tokenization: lowercase, drop `. , ! ? ; : ' " ( )`, split on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace(STRIP, "")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("gold query is empty after tokenization")]
    EmptyGoldQuery,
    #[error("no candidate/reference pairs to score")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("dialog {dialog_id} turn {turn}: no prediction in the run")]
    MissingPrediction { dialog_id: String, turn: usize },
    #[error("dialog {dialog_id} has no goal annotation")]
    MissingGoal { dialog_id: String },
    #[error("run references dialog {0} which is not in the dataset")]
    UnknownDialog(String),
    #[error("inform/success is defined for tod and full modes, not {0}")]
    UnsupportedMode(TaskMode),
    #[error("database: {0}")]
    Database(String),
    #[error("run file: {0}")]
    Io(String),
}

/// One system turn of a replayed dialog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEntry {
    /// Index of the system turn in the dialog.
    pub turn_index: usize,
    pub raw_state_text: String,
    pub parsed_state: Option<State>,
    pub response_text: String,
}

/// Predictions of one replay, keyed by dialog id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutput {
    pub dialogs: BTreeMap<String, Vec<RunEntry>>,
}

impl RunOutput {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| EvalError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn entry(&self, dialog_id: &str, turn_index: usize) -> Option<&RunEntry> {
        self.dialogs.get(dialog_id)?.iter().find(|e| e.turn_index == turn_index)
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.values().all(Vec::is_empty)
    }

    /// Every dialog id in the run must exist in `dialogs`.
    pub fn check_against(&self, dialogs: &[DialogExample]) -> Result<(), EvalError> {
        match self.dialogs.keys().find(|id| !dialogs.iter().any(|d| &d.dialog_id == *id)) {
            Some(id) => Err(EvalError::UnknownDialog(id.clone())),
            None => Ok(()),
        }
    }
}

/// A dialog as scored, possibly a subset copy of a dataset dialog. Run
/// entries are looked up under the copy's own id first, then under the
/// original id and turn index.
pub(crate) struct View<'a> {
    pub dialog: &'a DialogExample,
    origin: Option<(&'a str, &'a [usize])>,
}

impl<'a> View<'a> {
    pub fn entry<'r>(&self, run: &'r RunOutput, turn: usize) -> Result<&'r RunEntry, EvalError> {
        run.entry(&self.dialog.dialog_id, turn)
            .or_else(|| {
                let (id, kept) = self.origin?;
                run.entry(id, *kept.get(turn)?)
            })
            .ok_or_else(|| EvalError::MissingPrediction { dialog_id: self.dialog.dialog_id.clone(), turn })
    }
}

pub(crate) fn views(dialogs: &[DialogExample]) -> Vec<View<'_>> {
    dialogs.iter().map(|dialog| View { dialog, origin: None }).collect()
}

fn expanded_views(dialogs: &[ExpandedDialog]) -> Vec<View<'_>> {
    dialogs
        .iter()
        .map(|e| View { dialog: &e.dialog, origin: Some((e.origin_id.as_str(), e.kept_turns.as_slice())) })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Tod,
    Qa,
    Full,
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Tod => "tod",
            TaskMode::Qa => "qa",
            TaskMode::Full => "full",
        })
    }
}

impl std::str::FromStr for TaskMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tod" => Ok(TaskMode::Tod),
            "qa" => Ok(TaskMode::Qa),
            "full" => Ok(TaskMode::Full),
            other => Err(format!("unknown mode '{other}' (expected tod, qa or full)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    All,
    Answerable,
    Unanswerable,
}

impl std::str::FromStr for Subset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Subset::All),
            "answerable" => Ok(Subset::Answerable),
            "unanswerable" => Ok(Subset::Unanswerable),
            other => Err(format!("unknown subset '{other}' (expected all, answerable or unanswerable)")),
        }
    }
}

/// Denominators behind a report.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub dialogs: usize,
    pub qa_dialogs: usize,
    pub tod_turns: usize,
    pub qa_turns: usize,
    pub bleu_pairs: usize,
    /// Full mode: dialogs failed on Inform/Success by the QA gate.
    pub gated_dialogs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub mode: TaskMode,
    pub subset: Subset,
    pub bleu: Option<T>,
    pub inform: Option<T>,
    pub success: Option<T>,
    pub combined: Option<T>,
    pub accuracy: Option<T>,
    pub query_f1: Option<T>,
    pub qa_success_rate: Option<T>,
    pub counts: Counts,
}

/// `(inform + success) * 0.5 + bleu`.
pub fn combined<T: Scalar>(bleu: T, success: T, inform: T) -> T {
    (inform + success) / T::from_count(2) + bleu
}

impl<T: Scalar> MetricReport<T> {
    fn empty(mode: TaskMode, subset: Subset) -> Self {
        Self {
            mode,
            subset,
            bleu: None,
            inform: None,
            success: None,
            combined: None,
            accuracy: None,
            query_f1: None,
            qa_success_rate: None,
            counts: Counts::default(),
        }
    }

    /// Aligned text table with the task columns (BLEU, Success, Inform,
    /// Combined) or the QA columns (Accuracy, Success Rate, Query F1, BLEU).
    pub fn table(&self) -> String {
        let cols: [(&str, Option<T>); 4] = match self.mode {
            TaskMode::Qa => [
                ("Accuracy", self.accuracy),
                ("Success Rate", self.qa_success_rate),
                ("Query F1", self.query_f1),
                ("BLEU", self.bleu),
            ],
            _ => [("BLEU", self.bleu), ("Success", self.success), ("Inform", self.inform), ("Combined", self.combined)],
        };
        let cells: Vec<String> =
            cols.iter().map(|(_, v)| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v.to_f64()))).collect();
        let widths: Vec<usize> = cols.iter().zip(&cells).map(|((h, _), c)| h.len().max(c.len())).collect();
        let label = format!("{} / {:?}", self.mode, self.subset).to_lowercase();
        let pad = label.len().max(4);
        let mut head = format!("{:pad$}", "");
        let mut row = format!("{label:pad$}");
        for (((h, _), c), w) in cols.iter().zip(&cells).zip(&widths) {
            head.push_str(&format!("  {h:>w$}"));
            row.push_str(&format!("  {c:>w$}"));
        }
        format!("{head}\n{row}\n")
    }
}

/// Scores `run` against `dialogs` in one evaluation setting. Subsets are
/// scored on the expanded copies of the dialogs.
pub fn evaluate<T: Scalar + Float>(
    run: &RunOutput,
    dialogs: &[DialogExample],
    db: &EntityDatabase,
    mode: TaskMode,
    subset: Subset,
) -> Result<MetricReport<T>, EvalError> {
    if run.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    run.check_against(dialogs)?;
    let expansion;
    let views = match subset {
        Subset::All => views(dialogs),
        Subset::Answerable | Subset::Unanswerable => {
            expansion = expand_by_question_type(dialogs);
            expanded_views(if subset == Subset::Answerable { &expansion.answerable } else { &expansion.unanswerable })
        }
    };

    let mut report = MetricReport::empty(mode, subset);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for v in &views {
        for ex in v.dialog.exchanges() {
            if ex.is_qa() {
                report.counts.qa_turns += 1;
            } else {
                report.counts.tod_turns += 1;
            }
            let wanted = match mode {
                TaskMode::Tod => !ex.is_qa(),
                TaskMode::Qa => ex.is_qa(),
                TaskMode::Full => true,
            };
            if wanted {
                cands.push(v.entry(run, ex.system_index)?.response_text.as_str());
                refs.push(ex.reference());
            }
        }
    }
    report.counts.dialogs = views.len();
    report.counts.bleu_pairs = cands.len();
    report.bleu = Some(corpus_bleu(&cands, &refs)?);

    match mode {
        TaskMode::Qa => {
            let scores = qa::score_all::<T>(run, &views)?;
            report.counts.qa_dialogs = scores.len();
            let all_f1: Vec<T> = scores.iter().flat_map(|d| d.f1.iter().copied()).collect();
            report.accuracy = Some(qa::accuracy_of(&scores));
            report.qa_success_rate = Some(qa::success_rate_of(&scores));
            report.query_f1 = scalar::mean(&all_f1);
        }
        TaskMode::Tod | TaskMode::Full => {
            report.counts.qa_dialogs = views.iter().filter(|v| v.dialog.has_qa()).count();
            let outcomes = inform::outcomes(run, &views, db, mode)?;
            report.counts.gated_dialogs = outcomes.iter().filter(|o| o.gated).count();
            let r = inform::rates::<T>(&outcomes);
            report.inform = Some(r.inform);
            report.success = Some(r.success);
        }
    }
    if let (Some(b), Some(s), Some(i)) = (report.bleu, report.success, report.inform) {
        report.combined = Some(combined(b, s, i));
    }
    Ok(report)
}
