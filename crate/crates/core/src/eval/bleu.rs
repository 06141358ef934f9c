//! Corpus-level BLEU-4 without smoothing.

use std::collections::HashMap;

use num_traits::Float;

use super::scalar::Scalar;
use super::{tokenize, EvalError};

pub const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU-4 on the 0..=100 scale. Uses clipped n-gram counts, the
/// geometric mean of the orders, and brevity penalty `exp(1 - r/c)` when
/// `c <= r`. Any zero precision gives 0.
///
/// An order for which neither candidates nor references contain a single
/// n-gram (all sentences shorter than n) carries no evidence and is left out
/// of the mean; a corpus with no n-grams at all scores 100 against itself.
pub fn corpus_bleu<T: Scalar + Float>(candidates: &[&str], references: &[&str]) -> Result<T, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|s| tokenize(s)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(if r == 0 { T::from_count(100) } else { T::zero() });
    }

    let mut log_sum = T::zero();
    let mut orders = 0;
    for n in 1..=MAX_ORDER {
        let (mut matched, mut total, mut ref_total) = (0, 0, 0);
        for (cand, reference) in cands.iter().zip(&refs) {
            let ref_counts = ngram_counts(reference, n);
            ref_total += ref_counts.values().sum::<usize>();
            for (gram, count) in ngram_counts(cand, n) {
                total += count;
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
        if total == 0 && ref_total == 0 {
            continue;
        }
        if matched == 0 {
            return Ok(T::zero());
        }
        log_sum = log_sum + (T::from_count(matched) / T::from_count(total)).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(T::from_count(100));
    }
    let bp = if c <= r { (T::one() - T::from_count(r) / T::from_count(c)).exp() } else { T::one() };
    Ok(T::from_count(100) * bp * (log_sum / T::from_count(orders)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_disjoint() {
        let s = ["the train leaves at [value_time] .", "you can cancel before departure"];
        assert_eq!(corpus_bleu::<f64>(&s, &s).unwrap(), 100.0);
        assert_eq!(corpus_bleu::<f64>(&["a b c d"], &["e f g h"]).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(corpus_bleu::<f64>(&[], &[]), Err(EvalError::EmptyCorpus));
        assert_eq!(
            corpus_bleu::<f64>(&["a"], &[]),
            Err(EvalError::LengthMismatch { candidates: 1, references: 0 })
        );
    }

    #[test]
    fn brevity_penalty() {
        // unigram..4-gram precisions are all 1; only the length differs.
        let v: f64 = corpus_bleu(&["a b c d"], &["a b c d e f g h"]).unwrap();
        assert!((v - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn f32_agrees() {
        let c = ["a b c d e x", "the taxi is booked"];
        let r = ["a b c d e f", "your taxi is booked"];
        let a: f64 = corpus_bleu(&c, &r).unwrap();
        let b: f32 = corpus_bleu(&c, &r).unwrap();
        assert!((a - b as f64).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn self_bleu_and_permutation(
            corpus in prop::collection::vec(
                prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..10)
                    .prop_map(|w| w.join(" ")),
                1..6,
            ),
            shift in 0usize..6,
        ) {
            let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
            prop_assert_eq!(corpus_bleu::<f64>(&refs, &refs).unwrap(), 100.0);
            let cands: Vec<String> = corpus.iter().rev().cloned().collect();
            let cands: Vec<&str> = cands.iter().map(String::as_str).collect();
            let base: f64 = corpus_bleu(&cands, &refs).unwrap();
            let k = shift % refs.len();
            let mut rc = cands.clone();
            let mut rr = refs.clone();
            rc.rotate_left(k);
            rr.rotate_left(k);
            let rotated: f64 = corpus_bleu(&rc, &rr).unwrap();
            prop_assert!((base - rotated).abs() < 1e-9);
        }
    }
}
