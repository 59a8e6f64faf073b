use std::collections::{BTreeMap, BTreeSet};

use crate::params::Params;
use crate::{Error, Result};

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    /// Moment buffers for exactly the names in `trainable`.
    pub fn new(params: &Params, trainable: &BTreeSet<String>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        let mut m = BTreeMap::new();
        for name in trainable {
            m.insert(name.clone(), vec![0.0; params.require(name)?.numel()]);
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            v: m.clone(),
            m,
        })
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Vec<f32>>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(Error::Contract(format!("gradient for non-trainable parameter {name}")));
            };
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?
                .data_mut();
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps) + self.weight_decay * p[i] as f64;
                p[i] = (p[i] as f64 - lr * update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p: Params = Params::default();
        p.insert("w", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let set: BTreeSet<String> = ["w".to_string()].into();
        let mut opt = AdamW::new(&p, &set, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let grads = BTreeMap::from([("w".to_string(), vec![0.5, -2.0])]);
        opt.step(&mut p, &grads, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        let bad = BTreeMap::from([("z".to_string(), vec![1.0])]);
        assert!(opt.step(&mut p, &bad, 0.1).is_err());
    }
}
