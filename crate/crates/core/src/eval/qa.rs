//! Query F1, knowledge-source accuracy and QA success rate.

use std::collections::HashMap;

use super::scalar::{mean, percent, Scalar};
use super::{tokenize, views, EvalError, RunOutput, View};
use crate::dialog::DialogExample;

/// Mean query F1 a dialog needs for its QA turns to count as a success.
pub const SUCCESS_THRESHOLD: usize = 20;

/// Token-overlap F1 on the 0..=100 scale, with multiset intersection.
/// Computed as `200 * common / (|pred| + |gold|)`, which equals `2PR/(P+R)`.
pub fn query_f1<T: Scalar>(predicted: &str, gold: &str) -> Result<T, EvalError> {
    let gold = tokenize(gold);
    if gold.is_empty() {
        return Err(EvalError::EmptyGoldQuery);
    }
    let pred = tokenize(predicted);
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    Ok(T::from_count(200 * common) / T::from_count(pred.len() + gold.len()))
}

/// QA outcome of one dialog with at least one QA turn.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DialogQa<T> {
    /// Every QA turn routed to its annotated source.
    pub correct: bool,
    pub f1: Vec<T>,
}

impl<T: Scalar> DialogQa<T> {
    pub fn mean_f1(&self) -> T {
        mean(&self.f1).unwrap_or_else(T::zero)
    }

    pub fn succeeded(&self) -> bool {
        self.mean_f1() >= T::from_count(SUCCESS_THRESHOLD)
    }
}

pub(crate) fn score_dialog<T: Scalar>(run: &RunOutput, view: &View<'_>) -> Result<Option<DialogQa<T>>, EvalError> {
    let mut out = DialogQa { correct: true, f1: Vec::new() };
    for ex in view.dialog.exchanges() {
        let Some(ann) = ex.qa() else { continue };
        let entry = view.entry(run, ex.system_index)?;
        let gold_source = ann.gold_state.as_ref().map(|s| s.source());
        let predicted = entry.parsed_state.as_ref();
        if gold_source.is_none() || predicted.map(|s| s.source()) != gold_source {
            out.correct = false;
        }
        let gold_query = ann.query().ok_or(EvalError::EmptyGoldQuery)?;
        let pred_query = predicted.and_then(|s| s.query()).unwrap_or("");
        out.f1.push(query_f1(pred_query, gold_query)?);
    }
    Ok((!out.f1.is_empty()).then_some(out))
}

pub(crate) fn score_all<T: Scalar>(run: &RunOutput, views: &[View<'_>]) -> Result<Vec<DialogQa<T>>, EvalError> {
    let mut out = Vec::new();
    for v in views {
        out.extend(score_dialog(run, v)?);
    }
    Ok(out)
}

pub(crate) fn accuracy_of<T: Scalar>(scores: &[DialogQa<T>]) -> T {
    percent(scores.iter().filter(|d| d.correct).count(), scores.len())
}

pub(crate) fn success_rate_of<T: Scalar>(scores: &[DialogQa<T>]) -> T {
    percent(scores.iter().filter(|d| d.succeeded()).count(), scores.len())
}

/// Percentage of dialogs with QA turns whose QA turns were all routed to
/// the annotated source. A database prediction is always wrong.
pub fn source_accuracy<T: Scalar>(run: &RunOutput, dialogs: &[DialogExample]) -> Result<T, EvalError> {
    Ok(accuracy_of(&score_all::<T>(run, &views(dialogs))?))
}

/// Percentage of dialogs with QA turns whose mean query F1 is at least 20.
pub fn qa_success_rate<T: Scalar>(run: &RunOutput, dialogs: &[DialogExample]) -> Result<T, EvalError> {
    Ok(success_rate_of(&score_all::<T>(run, &views(dialogs))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Exact;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let v: Exact = query_f1("cancel taxi booking", "taxi cancel booking fee").unwrap();
        assert_eq!(v, Exact::new(600, 7));
        let f: f64 = query_f1("cancel taxi booking", "taxi cancel booking fee").unwrap();
        assert!((f - 85.714_285_714).abs() < 1e-6);
    }

    #[test]
    fn boundaries() {
        assert_eq!(query_f1::<f64>("Cancel, taxi!", "cancel taxi").unwrap(), 100.0);
        assert_eq!(query_f1::<f64>("a b", "c d").unwrap(), 0.0);
        assert_eq!(query_f1::<f64>("", "c d").unwrap(), 0.0);
        assert_eq!(query_f1::<f64>("?!", "c d").unwrap(), 0.0);
        assert_eq!(query_f1::<f64>("a", " .. "), Err(EvalError::EmptyGoldQuery));
    }

    #[test]
    fn multiset_counts() {
        // pred has "taxi" twice, gold once: only one counts.
        let v: Exact = query_f1("taxi taxi", "taxi fee").unwrap();
        assert_eq!(v, Exact::from_integer(50));
    }

    #[test]
    fn threshold_inclusive() {
        let at = DialogQa { correct: true, f1: vec![Exact::from_integer(20)] };
        assert!(at.succeeded());
        let below = DialogQa { correct: true, f1: vec![Exact::from_integer(30), Exact::from_integer(5)] };
        assert_eq!(below.mean_f1(), Exact::new(35, 2));
        assert!(!below.succeeded());
    }

    fn words() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "taxi", "Fee", "cancel."]), 1..8)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in words(), b in words()) {
            let ab: Exact = query_f1(&a, &b).unwrap();
            let ba: Exact = query_f1(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= Exact::from_integer(0) && ab <= Exact::from_integer(100));
            let mut ta = tokenize(&a);
            let mut tb = tokenize(&b);
            ta.sort();
            tb.sort();
            prop_assert_eq!(ab == Exact::from_integer(100), ta == tb);
        }
    }
}
