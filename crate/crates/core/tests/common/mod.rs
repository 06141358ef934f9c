//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into `obtod_core`; the point is to recompute the
//! metrics by a different route (brute-force scans, direct P/R formulas).

#![allow(dead_code)]

const STRIP: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')'];

pub fn tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !STRIP.contains(c))
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Query F1 by greedy one-to-one token matching and the textbook P/R form.
pub fn query_f1(pred: &str, gold: &str) -> f64 {
    let p = tokens(pred);
    let g = tokens(gold);
    assert!(!g.is_empty(), "oracle needs a gold query");
    if p.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; g.len()];
    let mut common = 0usize;
    for tok in &p {
        for (j, gt) in g.iter().enumerate() {
            if !used[j] && gt == tok {
                used[j] = true;
                common += 1;
                break;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

fn ngrams(toks: &[String], n: usize) -> Vec<Vec<String>> {
    if toks.len() < n {
        return Vec::new();
    }
    (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], item: &[String]) -> usize {
    list.iter().filter(|g| g.as_slice() == item).count()
}

/// Corpus BLEU-4 with clipped counts and no smoothing.
///
/// An order for which neither side has any n-gram is left out of the
/// geometric mean; if every order is left out the corpus is a perfect match.
pub fn corpus_bleu(cands: &[&str], refs: &[&str]) -> f64 {
    assert_eq!(cands.len(), refs.len());
    let ct: Vec<Vec<String>> = cands.iter().map(|s| tokens(s)).collect();
    let rt: Vec<Vec<String>> = refs.iter().map(|s| tokens(s)).collect();
    let c: usize = ct.iter().map(Vec::len).sum();
    let r: usize = rt.iter().map(Vec::len).sum();

    let mut product = 1.0f64;
    let mut orders = 0u32;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        let mut ref_total = 0usize;
        for (cs, rs) in ct.iter().zip(&rt) {
            let cg = ngrams(cs, n);
            let rg = ngrams(rs, n);
            total += cg.len();
            ref_total += rg.len();
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                matched += count(&cg, g).min(count(&rg, g));
            }
        }
        if total == 0 && ref_total == 0 {
            continue;
        }
        if total == 0 || matched == 0 {
            return 0.0;
        }
        product *= matched as f64 / total as f64;
        orders += 1;
    }
    if orders == 0 {
        return 100.0;
    }
    let bp = if c <= r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * product.powf(1.0 / orders as f64)
}

/// Tiny deterministic generator so the oracles do not share RNG plumbing
/// with the code under test.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn sentence(&mut self, vocab: &[&str], min: usize, max: usize) -> String {
        let len = min + self.below(max - min + 1);
        (0..len)
            .map(|_| vocab[self.below(vocab.len())])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[test]
fn oracle_sanity() {
    assert_eq!(query_f1("a b", "a b"), 100.0);
    assert_eq!(query_f1("a", "b"), 0.0);
    let v = query_f1("cancel taxi booking", "taxi cancel booking fee");
    assert!((v - 600.0 / 7.0).abs() < 1e-12);
    assert!((corpus_bleu(&["a b c d e"], &["a b c d e"]) - 100.0).abs() < 1e-12);
}
