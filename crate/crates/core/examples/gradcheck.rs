//! Check every autodiff op and the tiny model's end-to-end loss against
//! central differences, then show that a corrupted backward is caught.

use cxrgen::selfcheck::{model_grad_errors, op_grad_errors, GRAD_STEP, GRAD_TOL};
use cxrgen::tensor::OpKind;

fn worst(errors: &[(String, f64)]) -> (&str, f64) {
    errors
        .iter()
        .map(|(n, e)| (n.as_str(), *e))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

fn main() -> cxrgen::Result<()> {
    println!("h = {GRAD_STEP:e}, tolerance = {GRAD_TOL:e}");
    let ops = op_grad_errors(0, None)?;
    for (name, err) in &ops {
        println!("  {name:<26} {err:.2e}");
    }
    let model = model_grad_errors(0, None, 2)?;
    let (name, err) = worst(&model);
    println!("model: {} tensors, worst {name} {err:.2e}", model.len());

    let faulty = op_grad_errors(0, Some(OpKind::Gelu))?;
    let (name, err) = worst(&faulty);
    println!("with a doubled gelu backward: worst {name} {err:.2e} (fails: {})", err >= GRAD_TOL);
    Ok(())
}
