use std::collections::HashMap;

use crate::{Error, Result};

/// Lowercase, whitespace-split tokens.
pub fn lexical_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over `(prediction, reference)` pairs, scaled to 0..=100.
///
/// Clipped n-gram counts are summed over the corpus. Orders for which the
/// candidate side has no n-grams at all are left out of the geometric mean;
/// any included order with zero matches gives 0. No smoothing.
pub fn bleu4<S: AsRef<str>, T: AsRef<str>>(pairs: &[(S, T)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("BLEU over an empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (p, q) in pairs {
        let cand = lexical_tokens(p.as_ref());
        let refs = lexical_tokens(q.as_ref());
        c += cand.len();
        r += refs.len();
        for n in 1..=4 {
            let cc = ngram_counts(&cand, n);
            let rc = ngram_counts(&refs, n);
            totals[n - 1] += cand.len().saturating_sub(n - 1);
            matches[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        if matches[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure of one pair in 0..=1.
pub fn rouge_l_pair(prediction: &str, reference: &str) -> f64 {
    let c = lexical_tokens(prediction);
    let r = lexical_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean pair ROUGE-L, scaled to 0..=100.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(pairs: &[(S, T)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("ROUGE-L over an empty corpus".into()));
    }
    let sum: f64 = pairs.iter().map(|(p, r)| rouge_l_pair(p.as_ref(), r.as_ref())).sum();
    Ok(100.0 * sum / pairs.len() as f64)
}
