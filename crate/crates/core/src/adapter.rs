//! GELU MLP mapping vision features into the LM embedding space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::{linear_specs, Binder};
use crate::params::{ParamSpec, Params};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "adapter.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub n_hidden_layers: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_hidden: 32,
            d_out: 64,
            n_hidden_layers: 1,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 || self.n_hidden_layers == 0 {
            return Err(Error::Config(format!("adapter extents must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Layer `i` maps into the hidden width except the last, which maps to `d_out`.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let n = self.n_hidden_layers + 1;
        (0..n)
            .map(|i| {
                let din = if i == 0 { self.d_in } else { self.d_hidden };
                let dout = if i + 1 == n { self.d_out } else { self.d_hidden };
                (din, dout)
            })
            .collect()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.layer_dims()
            .into_iter()
            .enumerate()
            .flat_map(|(i, (din, dout))| linear_specs(&format!("adapter.layers.{i}"), din, dout, true))
            .collect()
    }
}

pub fn project_graph<F: Element>(b: &mut Binder<'_, F>, g: &mut Graph<F>, cfg: &AdapterConfig, x: Var) -> Result<Var> {
    if g.value(x).cols() != cfg.d_in {
        return Err(Error::Tensor(crate::TensorError::Shape {
            op: "project",
            lhs: g.shape(x).to_vec(),
            rhs: vec![cfg.d_in],
        }));
    }
    let n = cfg.n_hidden_layers + 1;
    let mut h = x;
    for i in 0..n {
        h = b.linear(g, h, &format!("adapter.layers.{i}"))?;
        if i + 1 < n {
            h = g.gelu(h)?;
        }
    }
    Ok(h)
}

pub fn project(features: &Tensor, cfg: &AdapterConfig, weights: &Params) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(weights);
    let x = g.constant(features.clone());
    let out = project_graph(&mut b, &mut g, cfg, x)?;
    Ok(g.value(out).clone())
}

/// Stage 1 trains every adapter parameter; stage 2 freezes them all.
pub fn stage_flags<F: Element>(stage: u8, weights: &Params<F>) -> Result<BTreeMap<String, bool>> {
    let trainable = match stage {
        1 => true,
        2 => false,
        other => return Err(Error::Contract(format!("stage must be 1 or 2, got {other}"))),
    };
    Ok(weights
        .names()
        .filter(|n| n.starts_with(PREFIX))
        .map(|n| (n.clone(), trainable))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{stream_rng, Stream};
    use crate::tensor::normal_cdf;

    fn set(p: &mut Params, name: &str, shape: &[usize], v: &[f64]) {
        p.insert(name, Tensor::from_f64(shape, v).unwrap());
    }

    #[test]
    fn zero_weights_zero_output() {
        let cfg = AdapterConfig { d_in: 3, d_hidden: 4, d_out: 5, n_hidden_layers: 2 };
        let p = Params::from_specs(&cfg.specs(), &mut stream_rng(0, Stream::Init));
        let zero = Params::from_specs(
            &cfg.specs().into_iter().map(|s| crate::params::ParamSpec::new(s.name, &s.shape, crate::params::Init::Zeros)).collect::<Vec<_>>(),
            &mut stream_rng(0, Stream::Init),
        );
        let x = Tensor::full(&[7, 3], 0.3);
        let out = project(&x, &cfg, &zero).unwrap();
        assert_eq!(out.shape(), &[7, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn bias_path_gives_constant_rows() {
        let cfg = AdapterConfig { d_in: 2, d_hidden: 2, d_out: 2, n_hidden_layers: 1 };
        let mut p: Params = Params::default();
        set(&mut p, "adapter.layers.0.weight", &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        set(&mut p, "adapter.layers.0.bias", &[2], &[0.0, 0.0]);
        set(&mut p, "adapter.layers.1.weight", &[2, 2], &[0.0; 4]);
        set(&mut p, "adapter.layers.1.bias", &[2], &[0.25, -1.5]);
        let out = project(&Tensor::from_f64(&[3, 2], &[1.0, 2.0, -3.0, 0.5, 9.0, 9.0]).unwrap(), &cfg, &p).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn single_token_gelu_two() {
        let cfg = AdapterConfig { d_in: 2, d_hidden: 1, d_out: 1, n_hidden_layers: 1 };
        let mut p: Params = Params::default();
        set(&mut p, "adapter.layers.0.weight", &[1, 2], &[1.0, 1.0]);
        set(&mut p, "adapter.layers.0.bias", &[1], &[0.0]);
        set(&mut p, "adapter.layers.1.weight", &[1, 1], &[1.0]);
        set(&mut p, "adapter.layers.1.bias", &[1], &[0.0]);
        let out = project(&Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap(), &cfg, &p).unwrap();
        let oracle = 2.0 * normal_cdf(2.0f64);
        assert!((out.data()[0] as f64 - oracle).abs() < 1e-6);
        assert!((oracle - 1.9545).abs() < 1e-4);
    }

    #[test]
    fn width_mismatch_is_error() {
        let cfg = AdapterConfig::default();
        let p = Params::from_specs(&cfg.specs(), &mut stream_rng(0, Stream::Init));
        assert!(project(&Tensor::zeros(&[2, 3]), &cfg, &p).is_err());
    }

    #[test]
    fn stage_flags_by_stage() {
        let cfg = AdapterConfig::default();
        let mut p = Params::from_specs(&cfg.specs(), &mut stream_rng(0, Stream::Init));
        p.insert("vision.pos_embed", Tensor::zeros(&[1, 1]));
        let s1 = stage_flags(1, &p).unwrap();
        assert!(!s1.is_empty() && s1.values().all(|&t| t));
        assert!(!s1.contains_key("vision.pos_embed"));
        assert!(stage_flags(2, &p).unwrap().values().all(|&t| !t));
        assert!(matches!(stage_flags(3, &p), Err(Error::Contract(_))));
    }
}
