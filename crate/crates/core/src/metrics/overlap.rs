use std::collections::HashMap;

use crate::{Error, Result};

pub const NUM_LABELS: usize = 14;

/// `2TP / (2TP + FP + FN)` scaled to 0..=100; 100 when nothing is positive
/// on either side.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        100.0
    } else {
        100.0 * (2 * tp) as f64 / den as f64
    }
}

/// Micro-F1 over every (pair, label) decision of 14-way label vectors.
pub fn label_micro_f1(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (p, r)) in pairs.iter().enumerate() {
        if p.len() != NUM_LABELS || r.len() != NUM_LABELS {
            return Err(Error::Contract(format!(
                "pair {i}: label vectors must have {NUM_LABELS} entries, got {} and {}",
                p.len(),
                r.len()
            )));
        }
        for (&a, &b) in p.iter().zip(r) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// `(surface form, label)`.
pub type Entity = (String, String);

fn bag(entities: &[Entity]) -> HashMap<(String, String), usize> {
    let mut m = HashMap::new();
    for (s, l) in entities {
        *m.entry((s.to_lowercase(), l.clone())).or_insert(0) += 1;
    }
    m
}

/// Corpus F1 from per-pair multiset matches on lowercased surface + label.
pub fn entity_f1(pairs: &[(Vec<Entity>, Vec<Entity>)]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, r) in pairs {
        let (bp, br) = (bag(p), bag(r));
        let hit: usize = bp.iter().map(|(k, &n)| n.min(br.get(k).copied().unwrap_or(0))).sum();
        tp += hit;
        fp += p.len() - hit;
        fn_ += r.len() - hit;
    }
    f1_from_counts(tp, fp, fn_)
}
