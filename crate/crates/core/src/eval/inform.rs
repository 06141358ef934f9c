//! Dialog-level Inform and Success in the MultiWOZ convention, simplified
//! to entity-in-response and placeholder presence.

use std::collections::BTreeSet;

use super::qa::score_dialog;
use super::scalar::{percent, Scalar};
use super::{tokenize, views, EvalError, RunOutput, TaskMode, View};
use crate::dialog::DialogExample;
use crate::knowledge::{query_database, EntityDatabase};
use crate::state::{BeliefBlock, BeliefState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InformSuccess<T> {
    pub inform: T,
    pub success: T,
}

/// Per-dialog outcome before averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub(crate) struct Outcome {
    pub inform: bool,
    pub success: bool,
    pub gated: bool,
}

fn contains_tokens(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn goal_block(domain: &str, constraints: &std::collections::BTreeMap<String, String>) -> BeliefBlock {
    constraints.iter().fold(BeliefBlock::new(domain), |b, (s, v)| b.with(s.clone(), v.clone()))
}

pub(crate) fn dialog_outcome(
    run: &RunOutput,
    view: &View<'_>,
    db: &EntityDatabase,
    mode: TaskMode,
) -> Result<Outcome, EvalError> {
    let dialog = view.dialog;
    if dialog.goal.is_empty() {
        return Err(EvalError::MissingGoal { dialog_id: dialog.dialog_id.clone() });
    }
    if mode == TaskMode::Full {
        if let Some(qa) = score_dialog::<f64>(run, view)? {
            if !qa.succeeded() {
                return Ok(Outcome { gated: true, ..Outcome::default() });
            }
        }
    }

    let mut responses = Vec::new();
    for ex in dialog.exchanges() {
        if mode == TaskMode::Tod && ex.is_qa() {
            continue;
        }
        responses.push(view.entry(run, ex.system_index)?);
    }
    let joined: Vec<String> = responses.iter().flat_map(|e| tokenize(&e.response_text)).collect();
    let lowered: Vec<String> = responses.iter().map(|e| e.response_text.to_lowercase()).collect();

    let mut inform = true;
    for (domain, constraints) in &dialog.goal.constraints {
        if constraints.is_empty() || !db.has_domain(domain) {
            continue;
        }
        let goal = BeliefState { blocks: vec![goal_block(domain, constraints)] };
        let venues: BTreeSet<&str> = query_database(db, &goal)
            .map_err(|e| EvalError::Database(e.to_string()))?
            .into_iter()
            .flat_map(|m| m.records)
            .map(|r| r.name.as_str())
            .collect();
        let named = venues.iter().any(|v| contains_tokens(&joined, &tokenize(v)));
        let placeholder = format!("[{domain}_name]");
        let offered = responses.iter().zip(&lowered).any(|(entry, text)| {
            if !text.contains(&placeholder) {
                return false;
            }
            let Some(block) = entry.parsed_state.as_ref().and_then(|s| s.belief()).and_then(|b| b.block(domain))
            else {
                return false;
            };
            let belief = BeliefState { blocks: vec![block.clone()] };
            query_database(db, &belief)
                .ok()
                .and_then(|m| m.into_iter().next())
                .and_then(|m| m.records.first().map(|r| venues.contains(r.name.as_str())))
                .unwrap_or(false)
        });
        if !(named || offered) {
            inform = false;
            break;
        }
    }

    let success = inform
        && dialog.goal.requests.iter().all(|(domain, slots)| {
            slots.iter().all(|slot| {
                let a = format!("[{domain}_{slot}]");
                let b = format!("[value_{slot}]");
                lowered.iter().any(|t| t.contains(&a) || t.contains(&b))
            })
        });
    Ok(Outcome { inform, success, gated: false })
}

pub(crate) fn outcomes(
    run: &RunOutput,
    views: &[View<'_>],
    db: &EntityDatabase,
    mode: TaskMode,
) -> Result<Vec<Outcome>, EvalError> {
    views.iter().map(|v| dialog_outcome(run, v, db, mode)).collect()
}

pub(crate) fn rates<T: Scalar>(outcomes: &[Outcome]) -> InformSuccess<T> {
    InformSuccess {
        inform: percent(outcomes.iter().filter(|o| o.inform).count(), outcomes.len()),
        success: percent(outcomes.iter().filter(|o| o.success).count(), outcomes.len()),
    }
}

/// Inform and Success rates over `dialogs`. In full mode a dialog whose QA
/// turns average below the success threshold fails both.
pub fn inform_success<T: Scalar>(
    run: &RunOutput,
    dialogs: &[DialogExample],
    db: &EntityDatabase,
    mode: TaskMode,
) -> Result<InformSuccess<T>, EvalError> {
    if mode == TaskMode::Qa {
        return Err(EvalError::UnsupportedMode(mode));
    }
    Ok(rates(&outcomes(run, &views(dialogs), db, mode)?))
}
