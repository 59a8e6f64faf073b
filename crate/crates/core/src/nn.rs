//! Graph-building helpers shared by the encoder and the language model.

use std::collections::{BTreeMap, BTreeSet};

use crate::params::{Init, ParamSpec, Params};
use crate::tensor::{Element, Graph, Var};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Prefix under which LoRA factors for `weight` live.
pub fn lora_a_name(weight: &str) -> String {
    format!("lora.A.{weight}")
}

pub fn lora_b_name(weight: &str) -> String {
    format!("lora.B.{weight}")
}

/// Binds named parameters into a [`Graph`], once each.
///
/// Parameters in the trainable set become gradient leaves; everything else
/// becomes a constant, so frozen tensors never get a gradient buffer.
pub struct Binder<'p, F: Element = f32> {
    params: &'p Params<F>,
    trainable: Option<&'p BTreeSet<String>>,
    lora_scale: f64,
    bound: BTreeMap<String, Var>,
}

impl<'p, F: Element> Binder<'p, F> {
    /// All parameters constant.
    pub fn frozen(params: &'p Params<F>) -> Self {
        Self {
            params,
            trainable: None,
            lora_scale: 1.0,
            bound: BTreeMap::new(),
        }
    }

    pub fn new(params: &'p Params<F>, trainable: &'p BTreeSet<String>) -> Self {
        Self {
            trainable: Some(trainable),
            ..Self::frozen(params)
        }
    }

    /// `alpha / r` applied to every low-rank path.
    pub fn with_lora_scale(mut self, scale: f64) -> Self {
        self.lora_scale = scale;
        self
    }

    pub fn params(&self) -> &'p Params<F> {
        self.params
    }

    /// Use `v` wherever `name` is requested.
    pub fn bind_override(&mut self, name: impl Into<String>, v: Var) {
        self.bound.insert(name.into(), v);
    }

    pub fn var(&mut self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?.clone();
        let v = if self.trainable.is_some_and(|s| s.contains(name)) {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Trainable bound parameters in name order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let Some(set) = self.trainable else {
            return Vec::new();
        };
        self.bound
            .iter()
            .filter(|(n, _)| set.contains(*n))
            .map(|(n, &v)| (n.clone(), v))
            .collect()
    }

    /// `x·Wᵀ (+ b)`, plus the low-rank path when factors for `W` exist.
    pub fn linear(&mut self, g: &mut Graph<F>, x: Var, prefix: &str) -> Result<Var> {
        let wname = format!("{prefix}.weight");
        let w = self.var(g, &wname)?;
        let mut y = g.matmul_nt(x, w)?;
        let a_name = lora_a_name(&wname);
        if self.params.contains(&a_name) || self.bound.contains_key(&a_name) {
            let a = self.var(g, &a_name)?;
            let b = self.var(g, &lora_b_name(&wname))?;
            let h = g.matmul_nt(x, a)?;
            let d = g.matmul_nt(h, b)?;
            let d = g.scale(d, self.lora_scale)?;
            y = g.add(y, d)?;
        }
        let bname = format!("{prefix}.bias");
        if self.params.contains(&bname) || self.bound.contains_key(&bname) {
            let b = self.var(g, &bname)?;
            y = g.add_row(y, b)?;
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, g: &mut Graph<F>, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(g, &format!("{prefix}.gain"))?;
        let bias = self.var(g, &format!("{prefix}.bias"))?;
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    /// Multi-head self-attention over the rows of `x`.
    pub fn attention(&mut self, g: &mut Graph<F>, x: Var, prefix: &str, n_heads: usize, causal: bool) -> Result<Var> {
        let q = self.linear(g, x, &format!("{prefix}.q"))?;
        let k = self.linear(g, x, &format!("{prefix}.k"))?;
        let v = self.linear(g, x, &format!("{prefix}.v"))?;
        let d = g.value(q).cols();
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if n_heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let p = g.softmax_rows(s, causal)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.linear(g, cat, &format!("{prefix}.o"))
    }

    /// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    pub fn block(&mut self, g: &mut Graph<F>, x: Var, prefix: &str, n_heads: usize, causal: bool) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let h = self.attention(g, h, &format!("{prefix}.attn"), n_heads, causal)?;
        let x = g.add(x, h)?;
        let h = self.layer_norm(g, x, &format!("{prefix}.ln2"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc2"))?;
        Ok(g.add(x, h)?)
    }
}

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::normal(format!("{prefix}.weight"), &[d_out, d_in])];
    if bias {
        v.push(ParamSpec::new(format!("{prefix}.bias"), &[d_out], Init::Zeros));
    }
    v
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gain"), &[d], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros),
    ]
}

pub fn block_specs(prefix: &str, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    let mut v = layer_norm_specs(&format!("{prefix}.ln1"), d);
    for p in ["q", "k", "v", "o"] {
        v.extend(linear_specs(&format!("{prefix}.attn.{p}"), d, d, true));
    }
    v.extend(layer_norm_specs(&format!("{prefix}.ln2"), d));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc1"), d, d_ff, true));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc2"), d_ff, d, true));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{stream_rng, Stream};
    use crate::tensor::Tensor;

    fn params(specs: &[ParamSpec]) -> Params {
        Params::from_specs(specs, &mut stream_rng(3, Stream::Init))
    }

    #[test]
    fn linear_matches_hand_product() {
        let mut p: Params = Params::default();
        p.insert("l.weight", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        p.insert("l.bias", Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap());
        let mut g = Graph::new();
        let mut b = Binder::frozen(&p);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let y = b.linear(&mut g, x, "l").unwrap();
        assert_eq!(g.value(y).data(), &[3.5, 6.5]);
    }

    #[test]
    fn lora_path_adds_scaled_low_rank_term() {
        let mut p: Params = Params::default();
        p.insert("l.weight", Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        p.insert(lora_a_name("l.weight"), Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        p.insert(lora_b_name("l.weight"), Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap());
        let mut g = Graph::new();
        let mut b = Binder::frozen(&p).with_lora_scale(1.0);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap());
        let y = b.linear(&mut g, x, "l").unwrap();
        assert_eq!(g.value(y).data(), &[6.0, 5.0]);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let p = params(&block_specs("b", 8, 16));
        let trainable: BTreeSet<String> = ["b.attn.q.weight".to_string()].into();
        let mut g = Graph::new();
        let mut b = Binder::new(&p, &trainable);
        let x = g.constant(Tensor::full(&[3, 8], 0.1));
        let y = b.block(&mut g, x, "b", 2, true).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let tv = b.trainable_vars();
        assert_eq!(tv.len(), 1);
        assert!(g.grad(tv[0].1).is_some());
        let k = b.var(&mut g, "b.attn.k.weight").unwrap();
        assert!(g.grad(k).is_none());
    }

    #[test]
    fn missing_param_is_named() {
        let p: Params = Params::default();
        let mut g = Graph::new();
        let mut b = Binder::frozen(&p);
        match b.var(&mut g, "nope") {
            Err(Error::MissingParam(n)) => assert_eq!(n, "nope"),
            other => panic!("{other:?}"),
        }
    }
}
