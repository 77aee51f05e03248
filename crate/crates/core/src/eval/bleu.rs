//! Corpus-level 4-gram BLEU with brevity penalty.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0..=100.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub cand_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_default() += 1;
        }
    }
    m
}

/// BLEU over tokenized corpora. With `smooth`, precisions of order ≥ 2 use
/// add-one smoothing.
pub fn bleu<S: AsRef<str>>(cands: &[Vec<S>], refs: &[Vec<S>], smooth: bool) -> Result<BleuScore> {
    if cands.is_empty() {
        return Err(Error::Input("BLEU needs a non-empty corpus".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} candidate lines vs {} reference lines",
            cands.len(),
            refs.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=MAX_ORDER {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += c.len().saturating_sub(n - 1);
            matches[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if smooth && n > 0 {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty: bp,
        cand_len: c_len,
        ref_len: r_len,
        matches,
        totals,
    })
}

/// BLEU over whitespace-tokenized lines.
pub fn bleu_lines<S: AsRef<str>>(cands: &[S], refs: &[S], smooth: bool) -> Result<BleuScore> {
    let tok = |v: &[S]| -> Vec<Vec<String>> { v.iter().map(|l| crate::text::tokenize(l.as_ref())).collect() };
    bleu(&tok(cands), &tok(refs), smooth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_is_100() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        assert!((bleu(&c, &c, false).unwrap().score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_four_gram_match_is_zero() {
        let c = vec![toks("a b c d")];
        let r = vec![toks("a b c e")];
        let s = bleu(&c, &r, false).unwrap();
        assert_eq!(s.matches[3], 0);
        assert_eq!(s.score, 0.0);
        assert!(bleu(&c, &r, true).unwrap().score > 0.0);
    }

    #[test]
    fn hand_computed_sentence() {
        let c = vec![toks("the quick brown fox jumps over the dog")];
        let r = vec![toks("the quick brown fox jumped over the lazy dog")];
        let s = bleu(&c, &r, false).unwrap();
        assert_eq!(s.matches, [7, 4, 2, 1]);
        assert_eq!(s.totals, [8, 7, 6, 5]);
        // exp(1 - 9/8) · (7/8 · 4/7 · 2/6 · 1/5)^(1/4) · 100
        assert!((s.score - 37.707946).abs() < 1e-5, "{}", s.score);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let e: Vec<Vec<String>> = vec![];
        assert!(bleu(&e, &e, false).is_err());
        assert!(bleu(&[toks("a")], &[toks("a"), toks("b")], false).is_err());
    }

    #[test]
    fn line_order_does_not_matter() {
        let c = vec![toks("a b c d e f"), toks("p q r s"), toks("x y z")];
        let r = vec![toks("a b c d x f"), toks("p q r s t"), toks("x y w")];
        let a = bleu(&c, &r, true).unwrap().score;
        let pc = vec![c[2].clone(), c[0].clone(), c[1].clone()];
        let pr = vec![r[2].clone(), r[0].clone(), r[1].clone()];
        assert_eq!(a, bleu(&pc, &pr, true).unwrap().score);
    }
}
