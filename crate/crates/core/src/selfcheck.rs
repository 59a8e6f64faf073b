//! Numeric self-checks: gradients, stage freezing, LoRA merging and the
//! learning-rate schedule.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{training_sequence_from_text, Section};
use crate::fixtures::{memorization_examples, pattern_image, tiny_model_config, toy_model_config};
use crate::lora::LoraConfig;
use crate::model::{Model, ModelConfig};
use crate::nn::Binder;
use crate::params::{stream_rng, Params, Stream};
use crate::tensor::{grad_check_with, GradCheckOptions, Graph, OpKind, Tensor, TensorError, Var};
use crate::train::{changed_params, cosine_lr, run_stage1, run_stage2, warmup_steps, StageOptions, TrainConfig};
use crate::{adapter, lm, vision, Result};

pub const GRAD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;
pub const MERGE_TOL: f64 = 1e-5;

/// Uniform entries in `[-1, 1]`.
fn rand_unit(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).expect("positive shape")
}

/// Redraw every parameter at O(1) activation scale: matrices uniform in
/// `±1/sqrt(fan_in)`, embedding tables in `±1`, gains `1 ± 0.5`, biases
/// `± 0.5`. The training init (std 0.02) leaves layer-norm inputs so small
/// that central differences at h = 1e-3 carry truncation error comparable
/// to small gradient entries, which would test the oracle, not backprop.
pub fn gradcheck_params(params: &mut Params, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(t) = params.get_mut(&name) else { continue };
        let shape = t.shape().to_vec();
        let (center, half) = if name.ends_with(".gain") {
            (1.0, 0.5)
        } else if shape.len() == 1 {
            (0.0, 0.5)
        } else if name.ends_with("embed") {
            (0.0, 1.0)
        } else {
            (0.0, 1.0 / (shape[1] as f64).sqrt())
        };
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = (center + half * rng.random_range(-1.0..=1.0)) as f32);
    }
}

type Apply = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> crate::tensor::Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    apply: Apply,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut case = |name: &'static str, shapes: &[&[usize]], apply: Apply| OpCase {
        name,
        inputs: shapes.iter().map(|s| rand_unit(rng, s)).collect(),
        apply,
    };
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_nt", &[&[3, 4], &[2, 4]], Box::new(|g, v| g.matmul_nt(v[0], v[1]))),
        case("transpose", &[&[3, 4]], Box::new(|g, v| g.transpose(v[0]))),
        case("add", &[&[3, 4], &[3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        case("add_row", &[&[3, 4], &[4]], Box::new(|g, v| g.add_row(v[0], v[1]))),
        case("mul", &[&[3, 4], &[3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale", &[&[3, 4]], Box::new(|g, v| g.scale(v[0], -1.7))),
        case("sum", &[&[3, 4]], Box::new(|g, v| g.sum(v[0]))),
        case("gelu", &[&[3, 4]], Box::new(|g, v| g.gelu(v[0]))),
        case(
            "layer_norm",
            &[&[3, 5], &[5], &[5]],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        case("softmax_rows", &[&[4, 4]], Box::new(|g, v| g.softmax_rows(v[0], false))),
        case("softmax_rows_causal", &[&[4, 4]], Box::new(|g, v| g.softmax_rows(v[0], true))),
        case("gather_rows", &[&[6, 3]], Box::new(|g, v| g.gather_rows(v[0], &[0, 2, 2, 5]))),
        case("concat_rows", &[&[2, 3], &[3, 3]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        case("slice_rows", &[&[5, 3]], Box::new(|g, v| g.slice_rows(v[0], 1, 4))),
        case("slice_cols", &[&[3, 5]], Box::new(|g, v| g.slice_cols(v[0], 1, 4))),
        case("concat_cols", &[&[3, 2], &[3, 3]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        case(
            "softmax_cross_entropy",
            &[&[4, 6]],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[1, 0, 5, 3], &[true, false, true, true])),
        ),
    ]
}

/// Worst relative error per `(op, input)` for every differentiable op, each
/// scalarised by a fixed random weighting of its output.
pub fn op_grad_errors(seed: u64, fault: Option<OpKind>) -> Result<Vec<(String, f64)>> {
    let mut rng = stream_rng(seed, Stream::Init);
    let mut out = Vec::new();
    for case in op_cases(&mut rng) {
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = (case.apply)(&mut g, &vars)?;
            g.shape(y).to_vec()
        };
        let weights = rand_unit(&mut rng, &probe);
        for wrt in 0..case.inputs.len() {
            let f = |g: &mut Graph<f64>, x: Var| {
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == wrt { x } else { g.constant(t.clone()) })
                    .collect();
                let y = (case.apply)(g, &vars)?;
                let w = g.constant(weights.clone());
                let yw = g.mul(y, w)?;
                g.sum(yw)
            };
            let opts = GradCheckOptions { fault, indices: None };
            let err = grad_check_with(f, &case.inputs[wrt], GRAD_STEP, &opts)?;
            out.push((format!("{}[{wrt}]", case.name), err));
        }
    }
    Ok(out)
}

/// End-to-end loss of `model` on one study, in f64, with `name` bound to `x`.
fn model_loss(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    params: &Params<f64>,
    lora_scale: f64,
    patches: &Tensor<f64>,
    seq: &crate::data::TokenSequence,
    over: Option<(&str, Var)>,
    trainable: Option<&BTreeSet<String>>,
) -> Result<(Var, Vec<(String, Var)>)> {
    let mut b = match trainable {
        Some(t) => Binder::new(params, t),
        None => Binder::frozen(params),
    }
    .with_lora_scale(lora_scale);
    if let Some((name, v)) = over {
        b.bind_override(name, v);
    }
    let pv = g.constant(patches.clone());
    let feats = vision::encode_graph(&mut b, g, &cfg.vision, pv)?;
    let embeds = adapter::project_graph(&mut b, g, &cfg.adapter, feats)?;
    let input = lm::splice(&mut b, g, seq, embeds)?;
    let (loss, _) = lm::lm_loss(&mut b, g, &cfg.lm, &input)?
        .ok_or_else(|| crate::Error::Contract("gradient-check sequence has no targets".into()))?;
    Ok((loss, b.trainable_vars()))
}

/// Worst relative error per parameter tensor of the tiny model's full loss
/// (encoder, adapter, LM and LoRA factors, all drawn by
/// [`gradcheck_params`]). Each tensor is probed at its `k` largest-gradient
/// entries plus `k` random ones.
pub fn model_grad_errors(seed: u64, fault: Option<OpKind>, k: usize) -> Result<Vec<(String, f64)>> {
    let cfg = tiny_model_config();
    let mut model = Model::new(cfg.clone(), seed)?;
    let lora_cfg = LoraConfig {
        rank: 2,
        alpha: 4.0,
        targets: ["attn.q", "attn.v", "mlp.fc1", "head"].map(String::from).to_vec(),
    };
    model.attach_lora(&lora_cfg, seed)?;
    let mut rng = stream_rng(seed, Stream::Shuffle);
    gradcheck_params(&mut model.params, &mut rng);
    let params = model.params.cast::<f64>();
    let scale = model.lora_scale();
    let image = pattern_image(seed as usize, cfg.vision.image_side, cfg.vision.image_side);
    let patches = vision::patchify::<f64>(&image, cfg.vision.patch_size)?;
    let seq = training_sequence_from_text("no acute disease.", Section::Findings, &format!("gc-{seed}"));

    let all: BTreeSet<String> = params.names().cloned().collect();
    let mut g = Graph::new();
    let (loss, vars) = model_loss(&mut g, &cfg, &params, scale, &patches, &seq, None, Some(&all))?;
    g.backward(loss)?;

    let mut out = Vec::new();
    for (name, v) in vars {
        let x = params.require(&name)?.clone();
        let n = x.numel();
        let grads: Vec<f64> = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()).then(a.cmp(&b)));
        let mut idx: BTreeSet<usize> = order.into_iter().take(k).collect();
        idx.extend(sample(&mut rng, n, k.min(n)));
        let f = |g: &mut Graph<f64>, xv: Var| -> crate::tensor::Result<Var> {
            model_loss(g, &cfg, &params, scale, &patches, &seq, Some((&name, xv)), None)
                .map(|(l, _)| l)
                .map_err(|e| TensorError::Contract(e.to_string()))
        };
        let opts = GradCheckOptions {
            fault,
            indices: Some(idx.into_iter().collect()),
        };
        out.push((name.clone(), grad_check_with(f, &x, GRAD_STEP, &opts)?));
    }
    Ok(out)
}

/// Outcome of one named invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self { name, passed, detail },
            Err(e) => Self {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

fn worst(errs: &[(String, f64)]) -> (String, f64) {
    errs.iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or_else(|| ("none".into(), 0.0))
}

/// Op-level checks over `seeds` plus one end-to-end tiny-model check.
pub fn check_gradients(seeds: &[u64], fault: Option<OpKind>) -> Result<(bool, String)> {
    let mut errs = Vec::new();
    for &s in seeds {
        errs.extend(op_grad_errors(s, fault)?);
    }
    let model = model_grad_errors(seeds.first().copied().unwrap_or(0), fault, 2)?;
    errs.extend(model);
    let (name, e) = worst(&errs);
    Ok((e < GRAD_TOL, format!("{} probes, worst {name} rel err {e:.2e}", errs.len())))
}

/// Stage 1 may change only adapter tensors; stage 2 only LoRA factors.
pub fn check_freeze_ledger(steps: usize, seed: u64) -> Result<(bool, String)> {
    let examples = memorization_examples(Section::Findings, 16);
    let cfg = TrainConfig {
        lr_max: 1e-3,
        global_batch: examples.len(),
        stage1_epochs: steps,
        stage2_epochs: steps,
        eval_every: steps,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(toy_model_config(), seed)?;
    let before = model.params.hashes();
    run_stage1(&mut model, &examples, &cfg, &mut StageOptions::default())?;
    let s1 = changed_params(&before, &model.params);
    let adapter_names: BTreeSet<String> = model.params.names().filter(|n| n.starts_with("adapter.")).cloned().collect();
    let ok1 = s1 == adapter_names;

    let mid = model.params.hashes();
    run_stage2(&mut model, &examples, &examples, &cfg, &LoraConfig::default(), &mut StageOptions::default())?;
    let s2 = changed_params(&mid, &model.params);
    let ok2 = !s2.is_empty() && s2.iter().all(|n| n.starts_with("lora."));
    Ok((
        ok1 && ok2,
        format!(
            "stage 1 changed {} tensors (adapter has {}), stage 2 changed {} tensors, non-LoRA among them: {}",
            s1.len(),
            adapter_names.len(),
            s2.len(),
            s2.iter().filter(|n| !n.starts_with("lora.")).count()
        ),
    ))
}

/// Merged and unmerged forwards agree; B = 0 attachment is a no-op.
pub fn check_lora_merge(seed: u64) -> Result<(bool, String)> {
    let cfg = tiny_model_config();
    let mut model = Model::new(cfg.clone(), seed)?;
    let image = pattern_image(3, cfg.vision.image_side, cfg.vision.image_side);
    let seq = training_sequence_from_text("heart is enlarged.", Section::Findings, "merge");
    let embeds = model.image_embeddings(&image)?;
    let base = model.logits(&seq, &embeds)?;
    model.attach_lora(&LoraConfig::default(), seed)?;
    let identical = model.logits(&seq, &embeds)? == base;

    let mut rng = stream_rng(seed, Stream::Shuffle);
    let noise = Normal::new(0.0, 0.1).expect("positive std");
    let b_names: Vec<String> = model.params.names().filter(|n| n.starts_with("lora.B.")).cloned().collect();
    for n in b_names {
        if let Some(t) = model.params.get_mut(&n) {
            t.data_mut().iter_mut().for_each(|v| *v = noise.sample(&mut rng) as f32);
        }
    }
    let unmerged = model.logits(&seq, &embeds)?;
    let merged = model.merged()?.logits(&seq, &embeds)?;
    let diff = unmerged
        .data()
        .iter()
        .zip(merged.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let moved = unmerged != base;
    Ok((
        identical && moved && diff < MERGE_TOL,
        format!("B=0 bit-identical: {identical}, merged max |diff| {diff:.2e}"),
    ))
}

/// Boundary values of the cosine schedule with warmup.
pub fn check_scheduler() -> Result<(bool, String)> {
    let lr = 1e-5;
    let mut bad = Vec::new();
    for total in [10usize, 100, 1000] {
        let w = warmup_steps(total, 0.03);
        let at = |s| cosine_lr(s, total, lr, 0.03);
        if at(0)? != 0.0 {
            bad.push(format!("total {total}: lr(0) != 0"));
        }
        if at(w)? != lr {
            bad.push(format!("total {total}: lr(warmup) != lr_max"));
        }
        if at(total)?.abs() > 1e-12 {
            bad.push(format!("total {total}: lr(total) != 0"));
        }
        // The ramp just before and the cosine just after the boundary follow
        // their closed forms, and both closed forms meet at lr_max.
        let ramp_left = lr * (w - 1) as f64 / w as f64;
        let decay_right = lr * 0.5 * (1.0 + (std::f64::consts::PI / (total - w) as f64).cos());
        let jump = (lr * w as f64 / w as f64 - lr * 0.5 * (1.0 + 0.0f64.cos())).abs();
        if (at(w - 1)? - ramp_left).abs() > 1e-12 || (at(w + 1)? - decay_right).abs() > 1e-12 || jump > 1e-12 {
            bad.push(format!("total {total}: discontinuous at warmup"));
        }
    }
    let ok = bad.is_empty();
    Ok((ok, if ok { "totals 10, 100, 1000".into() } else { bad.join("; ") }))
}

#[derive(Clone, Debug, Default)]
pub struct SelfcheckOptions {
    /// Double the backward of this op kind during gradient checks.
    pub fault: Option<OpKind>,
}

/// Run every check; the report carries wall time in seconds.
pub fn run_selfcheck(opts: &SelfcheckOptions) -> (Vec<CheckOutcome>, f64) {
    let start = Instant::now();
    let outcomes = vec![
        CheckOutcome::from("grad_check", check_gradients(&[0, 1, 2], opts.fault)),
        CheckOutcome::from("freeze_ledger", check_freeze_ledger(3, 17)),
        CheckOutcome::from("lora_merge", check_lora_merge(17)),
        CheckOutcome::from("scheduler", check_scheduler()),
    ];
    (outcomes, start.elapsed().as_secs_f64())
}

/// Parse an op name such as `gelu` or `layer_norm`.
pub fn parse_op_kind(name: &str) -> Option<OpKind> {
    let kinds = [
        ("matmul", OpKind::MatMul),
        ("matmul_nt", OpKind::MatMulNt),
        ("transpose", OpKind::Transpose),
        ("add", OpKind::Add),
        ("add_row", OpKind::AddRow),
        ("mul", OpKind::Mul),
        ("scale", OpKind::Scale),
        ("sum", OpKind::Sum),
        ("gelu", OpKind::Gelu),
        ("layer_norm", OpKind::LayerNorm),
        ("softmax", OpKind::Softmax),
        ("gather_rows", OpKind::GatherRows),
        ("concat_rows", OpKind::ConcatRows),
        ("slice_rows", OpKind::SliceRows),
        ("slice_cols", OpKind::SliceCols),
        ("concat_cols", OpKind::ConcatCols),
        ("cross_entropy", OpKind::CrossEntropy),
    ];
    kinds.iter().find(|(n, _)| *n == name).map(|&(_, k)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_and_fault_is_caught() {
        let errs = op_grad_errors(4, None).unwrap();
        assert!(errs.len() >= 22, "{}", errs.len());
        assert!(worst(&errs).1 < GRAD_TOL, "{:?}", worst(&errs));
        let faulty = op_grad_errors(4, Some(OpKind::Gelu)).unwrap();
        let gelu = faulty.iter().find(|(n, _)| n == "gelu[0]").unwrap().1;
        assert!(gelu > 0.1, "{gelu}");
    }

    #[test]
    fn tiny_model_gradients() {
        let errs = model_grad_errors(1, None, 2).unwrap();
        assert!(errs.iter().any(|(n, _)| n.starts_with("lora.A.")));
        assert!(errs.iter().any(|(n, _)| n.starts_with("vision.")));
        assert!(worst(&errs).1 < GRAD_TOL, "{:?}", worst(&errs));
    }

    #[test]
    fn other_checks_pass() {
        assert!(check_scheduler().unwrap().0);
        let (ok, detail) = check_lora_merge(3).unwrap();
        assert!(ok, "{detail}");
        let (ok, detail) = check_freeze_ledger(2, 5).unwrap();
        assert!(ok, "{detail}");
    }

    #[test]
    fn op_names_parse() {
        assert_eq!(parse_op_kind("gelu"), Some(OpKind::Gelu));
        assert_eq!(parse_op_kind("nope"), None);
    }
}
