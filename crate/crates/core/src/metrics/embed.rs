use crate::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Greedy-matching F1 of one pair of token-embedding sequences, in 0..=1,
/// plus the number of zero-norm vectors that were skipped.
pub fn embed_f1_pair(pred: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<(f64, usize)> {
    let width = pred.first().or(reference.first()).map_or(0, Vec::len);
    if pred.iter().chain(reference).any(|v| v.len() != width) {
        return Err(Error::Contract("embedding vectors differ in width".into()));
    }
    let keep = |side: &[Vec<f64>]| -> Vec<(Vec<f64>, f64)> {
        side.iter()
            .map(|v| (v.clone(), norm(v)))
            .filter(|(_, n)| *n > 0.0)
            .collect()
    };
    let (p, r) = (keep(pred), keep(reference));
    let skipped = pred.len() + reference.len() - p.len() - r.len();
    if p.is_empty() || r.is_empty() {
        return Ok((0.0, skipped));
    }
    let best = |from: &[(Vec<f64>, f64)], to: &[(Vec<f64>, f64)]| -> f64 {
        from.iter()
            .map(|(a, na)| to.iter().map(|(b, nb)| cosine(a, *na, b, *nb)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let recall = best(&r, &p);
    let precision = best(&p, &r);
    if precision + recall <= 0.0 {
        return Ok((0.0, skipped));
    }
    let f = (2.0 * precision * recall / (precision + recall)).clamp(0.0, 1.0);
    Ok((f, skipped))
}

/// Corpus mean of pair F1 scaled to 0..=100, and the total skipped-vector count.
pub fn embed_f1(pairs: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) -> Result<(f64, usize)> {
    if pairs.is_empty() {
        return Err(Error::Contract("embedding F1 over an empty corpus".into()));
    }
    let mut sum = 0.0;
    let mut skipped = 0;
    for (p, r) in pairs {
        let (f, s) = embed_f1_pair(p, r)?;
        sum += f;
        skipped += s;
    }
    Ok((100.0 * sum / pairs.len() as f64, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let (s, _) = embed_f1(&[(vec![e1.clone()], vec![e1.clone(), e2.clone()])]).unwrap();
        assert!((s - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(embed_f1(&[(vec![e1.clone()], vec![e2.clone()])]).unwrap().0, 0.0);
        let seq = vec![vec![0.3, -0.2], vec![1.0, 2.0]];
        assert!((embed_f1(&[(seq.clone(), seq)]).unwrap().0 - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_are_counted_and_skipped() {
        let (s, skipped) = embed_f1(&[(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![1.0, 0.0]])]).unwrap();
        assert_eq!(skipped, 1);
        assert!((s - 100.0).abs() < 1e-12);
        assert!(embed_f1(&[(vec![vec![1.0]], vec![vec![1.0, 0.0]])]).is_err());
    }
}
