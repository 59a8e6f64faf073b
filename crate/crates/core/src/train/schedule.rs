use crate::{Error, Result};

/// Warmup length for a stage: `round(ratio · total)`, at least one step.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    ((warmup_ratio * total_steps as f64).round() as usize).max(1)
}

/// Linear warmup from 0 to `lr_max`, then half-cosine decay to 0 at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(warmup_ratio > 0.0 && warmup_ratio < 1.0) {
        return Err(Error::Config(format!("warmup_ratio must lie in (0, 1), got {warmup_ratio}")));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total {total_steps}")));
    }
    let w = warmup_steps(total_steps, warmup_ratio);
    if step <= w || total_steps <= w {
        return Ok(lr_max * step.min(w) as f64 / w as f64);
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries() {
        for total in [10, 100, 1000] {
            let w = warmup_steps(total, 0.03);
            assert_eq!(cosine_lr(0, total, 1e-5, 0.03).unwrap(), 0.0);
            assert_eq!(cosine_lr(w, total, 1e-5, 0.03).unwrap(), 1e-5);
            assert!(cosine_lr(total, total, 1e-5, 0.03).unwrap().abs() < 1e-12);
        }
        assert_eq!(warmup_steps(10, 0.03), 1);
        assert_eq!(warmup_steps(100, 0.03), 3);
        assert_eq!(warmup_steps(1000, 0.03), 30);
    }

    #[test]
    fn errors() {
        assert!(matches!(cosine_lr(0, 0, 1e-5, 0.03), Err(Error::Config(_))));
        assert!(cosine_lr(0, 10, 1e-5, 0.0).is_err());
        assert!(cosine_lr(11, 10, 1e-5, 0.03).is_err());
    }
}
