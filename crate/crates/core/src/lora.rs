//! Low-rank adapters on LM projection weights: attach, forward, merge.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::nn::{lora_a_name, lora_b_name};
use crate::params::{sample_normal, stream_rng, Stream, INIT_STD};
use crate::params::Params;
use crate::tensor::{matmul_plain, Graph, Tensor};
use crate::{Error, Result};

pub const PREFIX: &str = "lora.";
const A_PREFIX: &str = "lora.A.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Either full weight names or projection suffixes such as `attn.q`,
    /// which match that projection in every LM block.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: vec!["attn.q".into(), "attn.v".into()],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("lora alpha must be > 0, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora target list is empty".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn is_projection(params: &Params, name: &str) -> bool {
    name.starts_with("lm.")
        && name.ends_with(".weight")
        && params.get(name).is_some_and(|t| t.shape().len() == 2)
}

/// Expand configured targets into concrete LM weight names.
pub fn resolve_targets(params: &Params, cfg: &LoraConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut out = BTreeSet::new();
    for t in &cfg.targets {
        let mut matched = false;
        if is_projection(params, t) {
            out.insert(t.clone());
            matched = true;
        }
        let direct = format!("lm.{t}.weight");
        if is_projection(params, &direct) {
            out.insert(direct);
            matched = true;
        }
        let suffix = format!(".{t}.weight");
        for name in params.names() {
            if name.starts_with("lm.blocks.") && name.ends_with(&suffix) && is_projection(params, name) {
                let mid = &name["lm.blocks.".len()..name.len() - suffix.len()];
                if mid.chars().all(|c| c.is_ascii_digit()) {
                    out.insert(name.clone());
                    matched = true;
                }
            }
        }
        if !matched {
            return Err(Error::Config(format!("unknown LoRA target {t:?}")));
        }
    }
    for name in &out {
        let s = params.require(name)?.shape();
        if cfg.rank > s[0].min(s[1]) {
            return Err(Error::Config(format!(
                "lora rank {} exceeds min extent of {name} {:?}",
                cfg.rank, s
            )));
        }
    }
    Ok(out.into_iter().collect())
}

pub fn is_attached(params: &Params) -> bool {
    params.names().any(|n| n.starts_with(PREFIX))
}

/// Names of all LoRA factor tensors.
pub fn lora_names(params: &Params) -> BTreeSet<String> {
    params.names().filter(|n| n.starts_with(PREFIX)).cloned().collect()
}

/// Adds `lora.A.<w>` (normal, std 0.02) and zero `lora.B.<w>` for every target.
/// Returns the adapted weight names.
pub fn attach(params: &mut Params, cfg: &LoraConfig, seed: u64) -> Result<Vec<String>> {
    if is_attached(params) {
        return Err(Error::Contract("LoRA factors are already attached".into()));
    }
    let targets = resolve_targets(params, cfg)?;
    let mut rng = stream_rng(seed, Stream::Lora);
    for name in &targets {
        let s = params.require(name)?.shape().to_vec();
        let (d_out, d_in) = (s[0], s[1]);
        params.insert(lora_a_name(name), sample_normal(&mut rng, &[cfg.rank, d_in], INIT_STD));
        params.insert(lora_b_name(name), Tensor::zeros(&[d_out, cfg.rank]));
    }
    Ok(targets)
}

/// `x·W0ᵀ + scale·(x·Aᵀ)·Bᵀ`, never forming `B·A`.
pub fn lora_forward(x: &Tensor, w0: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, wv, av, bv) = (
        g.constant(x.clone()),
        g.constant(w0.clone()),
        g.constant(a.clone()),
        g.constant(b.clone()),
    );
    let base = g.matmul_nt(xv, wv)?;
    let h = g.matmul_nt(xv, av)?;
    let d = g.matmul_nt(h, bv)?;
    let d = g.scale(d, scale)?;
    let y = g.add(base, d)?;
    Ok(g.value(y).clone())
}

/// `scale·B·A`.
pub fn delta(a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let mut ba = matmul_plain(b, a)?;
    let s = scale as f32;
    ba.data_mut().iter_mut().for_each(|v| *v *= s);
    Ok(ba)
}

pub fn merge_pair(w0: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let d = delta(a, b, scale)?;
    if d.shape() != w0.shape() {
        return Err(Error::Tensor(crate::TensorError::Shape {
            op: "merge",
            lhs: w0.shape().to_vec(),
            rhs: d.shape().to_vec(),
        }));
    }
    let mut w = w0.clone();
    for (x, y) in w.data_mut().iter_mut().zip(d.data()) {
        *x += *y;
    }
    Ok(w)
}

/// Fold every factor pair into its base weight and drop the factors.
pub fn merge(params: &Params, scale: f64) -> Result<Params> {
    let mut out = params.clone();
    let bases: Vec<String> = params
        .names()
        .filter_map(|n| n.strip_prefix(A_PREFIX).map(str::to_string))
        .collect();
    for base in bases {
        let a = params.require(&lora_a_name(&base))?;
        let b = params.require(&lora_b_name(&base))?;
        let merged = merge_pair(params.require(&base)?, a, b, scale)?;
        out.insert(base.clone(), merged);
        out.remove(&lora_a_name(&base));
        out.remove(&lora_b_name(&base));
    }
    if is_attached(&out) {
        return Err(Error::Contract("LoRA B factor without matching A factor".into()));
    }
    Ok(out)
}

/// Singular values in descending order (one-sided Jacobi, f64).
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let (r, c) = (m.rows(), m.cols());
    // columns of `a` are rotated until mutually orthogonal
    let mut a: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..c {
            for q in p + 1..c {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..r {
                    let (x, y) = (a[i * c + p], a[i * c + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let (x, y) = (a[i * c + p], a[i * c + q]);
                    a[i * c + p] = cs * x - sn * y;
                    a[i * c + q] = sn * x + cs * y;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut s: Vec<f64> = (0..c)
        .map(|j| (0..r).map(|i| a[i * c + j] * a[i * c + j]).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn numerical_rank(m: &Tensor, tol: f64) -> usize {
    singular_values(m).into_iter().filter(|&s| s > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LMConfig;
    use crate::params::{stream_rng, Stream};

    fn lm_params() -> Params {
        let cfg = LMConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_positions: 16,
            ..LMConfig::default()
        };
        Params::from_specs(&cfg.specs(), &mut stream_rng(0, Stream::Init))
    }

    #[test]
    fn default_targets_are_q_and_v_of_every_block() {
        let p = lm_params();
        let t = resolve_targets(&p, &LoraConfig::default()).unwrap();
        assert_eq!(
            t,
            [
                "lm.blocks.0.attn.q.weight",
                "lm.blocks.0.attn.v.weight",
                "lm.blocks.1.attn.q.weight",
                "lm.blocks.1.attn.v.weight"
            ]
        );
    }

    #[test]
    fn attach_counts_and_errors() {
        let mut p = lm_params();
        let cfg = LoraConfig::default();
        let before = p.numel();
        let targets = attach(&mut p, &cfg, 1).unwrap();
        let added: usize = targets.len() * cfg.rank * (8 + 8);
        assert_eq!(p.numel() - before, added);
        assert!(lora_names(&p).iter().filter(|n| n.starts_with("lora.B.")).all(|n| p.get(n).unwrap().data().iter().all(|&v| v == 0.0)));
        assert!(attach(&mut p, &cfg, 1).is_err());
        let mut q = lm_params();
        let bad = LoraConfig { targets: vec!["attn.z".into()], ..cfg.clone() };
        assert!(matches!(attach(&mut q, &bad, 1), Err(Error::Config(_))));
        let big = LoraConfig { rank: 9, ..cfg };
        assert!(matches!(attach(&mut q, &big, 1), Err(Error::Config(_))));
    }

    #[test]
    fn head_and_full_names_resolve() {
        let p = lm_params();
        let cfg = LoraConfig {
            targets: vec!["head".into(), "lm.blocks.1.mlp.fc1.weight".into()],
            ..LoraConfig::default()
        };
        assert_eq!(resolve_targets(&p, &cfg).unwrap(), ["lm.blocks.1.mlp.fc1.weight", "lm.head.weight"]);
    }

    #[test]
    fn rank_one_hand_case() {
        let x = Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap();
        let w0 = Tensor::from_f64(&[2, 2], &[0.5, 1.0, -1.0, 2.0]).unwrap();
        let a = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let b = Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap();
        let base = lora_forward(&x, &w0, &a, &b, 0.0).unwrap();
        let y = lora_forward(&x, &w0, &a, &b, 1.0).unwrap();
        assert_eq!(base.data(), &[6.5, 7.0]);
        assert_eq!(y.data(), &[9.5, 7.0]);
    }

    #[test]
    fn merge_with_zero_b_is_exact() {
        let w0 = Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = Tensor::from_f64(&[1, 3], &[0.3, -0.1, 0.7]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        assert_eq!(merge_pair(&w0, &a, &b, 2.0).unwrap(), w0);
    }

    #[test]
    fn svd_of_known_matrix() {
        let m = Tensor::from_f64(&[2, 2], &[3.0, 0.0, 4.0, 5.0]).unwrap();
        let s = singular_values(&m);
        // 3 0 / 4 5 has singular values sqrt(45) and sqrt(5)
        assert!((s[0] - 45f64.sqrt()).abs() < 1e-6);
        assert!((s[1] - 5f64.sqrt()).abs() < 1e-6);
        assert_eq!(numerical_rank(&Tensor::from_f64(&[2, 2], &[1.0, 2.0, 2.0, 4.0]).unwrap(), 1e-6), 1);
    }
}
