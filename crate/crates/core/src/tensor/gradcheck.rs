//! Central-difference verification of analytic gradients.

use super::{Element, Graph, OpKind, Result, Tensor, TensorError, Var};

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Double the backward of this op kind in the analytic pass.
    pub fault: Option<OpKind>,
    /// Restrict the comparison to these flat element indices.
    pub indices: Option<Vec<usize>>,
}

/// Max over elements of `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`
/// for a scalar-valued `f`, with numeric derivatives from central differences
/// of step `h`.
pub fn grad_check<F, Func>(f: Func, x: &Tensor<F>, h: f64) -> Result<f64>
where
    F: Element,
    Func: Fn(&mut Graph<F>, Var) -> Result<Var>,
{
    grad_check_with(f, x, h, &GradCheckOptions::default())
}

pub fn grad_check_with<F, Func>(f: Func, x: &Tensor<F>, h: f64, opts: &GradCheckOptions) -> Result<f64>
where
    F: Element,
    Func: Fn(&mut Graph<F>, Var) -> Result<Var>,
{
    if !(h > 0.0 && h < 0.1) {
        return Err(TensorError::Contract(format!("grad_check step must lie in (0, 0.1), got {h}")));
    }

    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_fault(kind);
    }
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NotScalar(g.shape(out).to_vec()));
    }
    g.backward(out)?;
    let analytic: Vec<F> = g
        .grad(xv)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![F::zero(); x.numel()]);

    let eval = |data: Vec<F>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(x.shape(), data)?);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item()?.as_f64())
    };

    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..x.numel()).collect(),
    };
    let mut worst = 0.0f64;
    for i in indices {
        if i >= x.numel() {
            return Err(TensorError::Index { index: i, bound: x.numel() });
        }
        let mut plus = x.data().to_vec();
        plus[i] = F::of(plus[i].as_f64() + h);
        let mut minus = x.data().to_vec();
        minus[i] = F::of(minus[i].as_f64() - h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i].as_f64();
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap();
        let err = grad_check(|g, x| g.sum(x), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn half_squared_norm() {
        let x = Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let f = |g: &mut Graph<f64>, x: Var| {
            let sq = g.mul(x, x)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, xv).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[3.0, 4.0]);
        assert!(grad_check(f, &x, 1e-3).unwrap() < 1e-6);
    }

    #[test]
    fn doubled_backward_is_flagged_near_one_third() {
        let x = Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let f = |g: &mut Graph<f64>, x: Var| {
            let sq = g.mul(x, x)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        };
        let opts = GradCheckOptions {
            fault: Some(OpKind::Mul),
            indices: None,
        };
        let err = grad_check_with(f, &x, 1e-3, &opts).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(grad_check(|g, x| g.sum(x), &x, 0.5), Err(TensorError::Contract(_))));
        assert!(matches!(
            grad_check(|g, x| g.scale(x, 2.0), &x, 1e-3),
            Err(TensorError::NotScalar(_))
        ));
    }
}
