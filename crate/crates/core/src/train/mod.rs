//! Two-stage training: adapter-only alignment, then LoRA fine-tuning.

mod optim;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter;
use crate::data::{
    encoder_input, load_study_images, training_sequence_from_text, GrayImage, Manifest, Section, Split, TokenSequence,
};
use crate::lm;
use crate::lora::{self, LoraConfig};
use crate::model::Model;
use crate::nn::Binder;
use crate::params::{stream_rng, Params, Stream};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

pub use optim::AdamW;
pub use schedule::{cosine_lr, warmup_steps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub global_batch: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub section: Section,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Keep the adapter trainable alongside LoRA in stage 2.
    pub train_adapter_in_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-5,
            warmup_ratio: 0.03,
            global_batch: 16,
            stage1_epochs: 1,
            stage2_epochs: 3,
            seed: 17,
            eval_every: 50,
            section: Section::Findings,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            train_adapter_in_stage2: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!("warmup_ratio must lie in (0, 1), got {}", self.warmup_ratio)));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.global_batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("global_batch and eval_every must be >= 1".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        Ok(())
    }

    pub fn epochs(&self, stage: u8) -> usize {
        if stage == 1 {
            self.stage1_epochs
        } else {
            self.stage2_epochs
        }
    }

    /// Optimizer steps a stage takes over `n` samples.
    pub fn total_steps(&self, stage: u8, n: usize) -> usize {
        n.div_ceil(self.global_batch) * self.epochs(stage)
    }
}

/// One training or evaluation item: an encoder-sized image and its sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub study_id: String,
    pub image: GrayImage,
    pub sequence: TokenSequence,
}

impl Example {
    pub fn new(study_id: impl Into<String>, image: GrayImage, report: &str, section: Section) -> Self {
        let study_id = study_id.into();
        let sequence = training_sequence_from_text(report, section, &study_id);
        Self {
            study_id,
            image,
            sequence,
        }
    }
}

/// Examples for every sample of `split` that has `section` text, in
/// manifest order.
pub fn prepare_examples(manifest: &Manifest, split: Split, section: Section, side: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for s in manifest.split(split) {
        let Some(report) = s.section(section) else { continue };
        let images = load_study_images(manifest, s)?;
        let image = encoder_input(&images, side)?;
        out.push(Example::new(s.study_id.clone(), image, report, section));
    }
    Ok(out)
}

/// Frozen-side inputs cached once per stage.
struct Cached {
    features: Tensor,
    embeds: Tensor,
    sequence: TokenSequence,
}

fn cache(model: &Model, examples: &[Example]) -> Result<Vec<Cached>> {
    examples
        .iter()
        .map(|e| {
            let features = model.encode(&e.image)?.tokens;
            let embeds = model.project(&features)?;
            Ok(Cached {
                features,
                embeds,
                sequence: e.sequence.clone(),
            })
        })
        .collect()
}

fn cached_loss(model: &Model, c: &Cached) -> Result<Option<(f64, usize)>> {
    model.loss(&c.sequence, &c.embeds)
}

fn weighted_mean(model: &Model, items: &[Cached]) -> Result<f64> {
    let (mut num, mut den) = (0.0f64, 0usize);
    for c in items {
        if let Some((l, n)) = cached_loss(model, c)? {
            num += l * n as f64;
            den += n;
        }
    }
    if den == 0 {
        return Err(Error::Config("no loss targets in evaluation split".into()));
    }
    Ok(num / den as f64)
}

/// Token-weighted mean masked loss. Reads the model only.
pub fn evaluate_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    weighted_mean(model, &cache(model, examples)?)
}

/// Names whose hash differs between `before` and `after`.
pub fn changed_params(before: &BTreeMap<String, String>, after: &Params) -> BTreeSet<String> {
    let now = after.hashes();
    let mut out: BTreeSet<String> = now
        .iter()
        .filter(|(k, h)| before.get(*k) != Some(*h))
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(before.keys().filter(|k| !now.contains_key(*k)).cloned());
    out
}

/// Sinks for per-step records and stage-2 checkpoints.
#[derive(Default)]
pub struct StageOptions<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl StageOptions<'_> {
    fn record(&mut self, v: serde_json::Value) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{v}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub trainable: Vec<String>,
    /// Batch loss at each step, before that step's update.
    pub train_losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub evals: Vec<(usize, f64)>,
    pub best: Option<(usize, f64)>,
    pub best_checkpoint: Option<PathBuf>,
}

fn clip(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
}

/// Forward and backward over one batch. Each sample's loss is weighted by
/// its share of the batch's targets, so the result is the token-weighted
/// batch mean.
fn batch_grads(
    model: &Model,
    stage: u8,
    trainable: &BTreeSet<String>,
    batch: &[&Cached],
    adapter_live: bool,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let counts: Vec<usize> = batch
        .iter()
        .map(|c| lm::target_count(&c.sequence))
        .collect();
    let total: usize = counts.iter().sum();
    let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut loss = 0.0;
    if total == 0 {
        return Ok((0.0, grads));
    }
    for (c, &n) in batch.iter().zip(&counts) {
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&model.params, trainable).with_lora_scale(model.lora_scale());
        let pe = if stage == 1 || adapter_live {
            let f = g.constant(c.features.clone());
            adapter::project_graph(&mut b, &mut g, &model.config.adapter, f)?
        } else {
            g.constant(c.embeds.clone())
        };
        let input = lm::splice(&mut b, &mut g, &c.sequence, pe)?;
        let Some((l, _)) = lm::lm_loss(&mut b, &mut g, &model.config.lm, &input)? else {
            continue;
        };
        let w = n as f64 / total as f64;
        loss += g.value(l).item()? as f64 * w;
        let scaled = g.scale(l, w)?;
        g.backward(scaled)?;
        for (name, v) in b.trainable_vars() {
            if let Some(gr) = g.grad(v) {
                let acc = grads.entry(name).or_insert_with(|| vec![0.0; gr.len()]);
                for (a, x) in acc.iter_mut().zip(gr) {
                    *a += *x;
                }
            }
        }
    }
    Ok((loss, grads))
}

struct Loop<'m> {
    model: &'m mut Model,
    cfg: &'m TrainConfig,
    stage: u8,
    trainable: BTreeSet<String>,
}

impl Loop<'_> {
    fn check_ledger(&self, before: &BTreeMap<String, String>) -> Result<()> {
        let stray: Vec<String> = changed_params(before, &self.model.params)
            .into_iter()
            .filter(|n| !self.trainable.contains(n))
            .collect();
        if stray.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "stage {} changed frozen parameters: {}",
                self.stage,
                stray.join(", ")
            )))
        }
    }

    fn run(
        &mut self,
        train: &[Cached],
        val: &[Cached],
        opts: &mut StageOptions<'_>,
    ) -> Result<StageReport> {
        let cfg = self.cfg;
        let stage = self.stage;
        let before = self.model.params.hashes();
        let total = cfg.total_steps(stage, train.len());
        let mut opt = AdamW::new(&self.model.params, &self.trainable, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)?;
        let mut rng = stream_rng(cfg.seed, Stream::Shuffle);
        let adapter_live = stage == 2 && cfg.train_adapter_in_stage2;
        let mut report = StageReport {
            stage,
            trainable: self.trainable.iter().cloned().collect(),
            ..StageReport::default()
        };
        let mut best_params: Option<Params> = None;
        let mut step = 0usize;
        for _epoch in 0..cfg.epochs(stage) {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.global_batch) {
                step += 1;
                let batch: Vec<&Cached> = chunk.iter().map(|&i| &train[i]).collect();
                let (loss, mut grads) = batch_grads(self.model, stage, &self.trainable, &batch, adapter_live)?;
                if let Some(max) = cfg.grad_clip {
                    clip(&mut grads, max);
                }
                let lr = cosine_lr(step, total, cfg.lr_max, cfg.warmup_ratio)?;
                opt.step(&mut self.model.params, &grads, lr)?;
                report.train_losses.push(loss);
                report.lrs.push(lr);
                opts.record(serde_json::json!({"stage": stage, "step": step, "lr": lr, "train_loss": loss}))?;
                let epoch_end = chunk.last() == order.last();
                if stage == 2 && (step.is_multiple_of(cfg.eval_every) || epoch_end) {
                    self.evaluate(step, val, opts, &mut report, &mut best_params)?;
                }
            }
        }
        report.steps = step;
        if let Some(best) = best_params {
            self.model.params = best;
        }
        self.check_ledger(&before)?;
        Ok(report)
    }

    fn evaluate(
        &mut self,
        step: usize,
        val: &[Cached],
        opts: &mut StageOptions<'_>,
        report: &mut StageReport,
        best_params: &mut Option<Params>,
    ) -> Result<()> {
        if report.evals.last().is_some_and(|&(s, _)| s == step) {
            return Ok(());
        }
        let refreshed = if self.cfg.train_adapter_in_stage2 {
            Some(refresh(self.model, val)?)
        } else {
            None
        };
        let loss = weighted_mean(self.model, refreshed.as_deref().unwrap_or(val))?;
        report.evals.push((step, loss));
        opts.record(serde_json::json!({"stage": 2, "step": step, "eval_loss": loss}))?;
        if report.best.is_none_or(|(_, b)| loss < b) {
            report.best = Some((step, loss));
            *best_params = Some(self.model.params.clone());
            if let Some(dir) = &opts.checkpoint_dir {
                let path = dir.join(format!("stage2-step{step:06}-loss{loss:.6}.ckpt"));
                let ck = self.model.to_checkpoint(serde_json::json!({
                    "stage": 2,
                    "step": step,
                    "eval_loss": loss,
                    "section": self.cfg.section,
                }));
                ck.save(&path)?;
                report.best_checkpoint = Some(path);
            }
        }
        Ok(())
    }
}

fn refresh(model: &Model, val: &[Cached]) -> Result<Vec<Cached>> {
    val.iter()
        .map(|c| {
            Ok(Cached {
                features: c.features.clone(),
                embeds: model.project(&c.features)?,
                sequence: c.sequence.clone(),
            })
        })
        .collect()
}

/// Stage 1: one pass (by default) training only the adapter.
pub fn run_stage1(model: &mut Model, train: &[Example], cfg: &TrainConfig, opts: &mut StageOptions<'_>) -> Result<StageReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config(format!("no training samples with {} text", cfg.section)));
    }
    let trainable: BTreeSet<String> = adapter::stage_flags(1, &model.params)?
        .into_iter()
        .filter(|(_, t)| *t)
        .map(|(n, _)| n)
        .collect();
    let cached = cache(model, train)?;
    Loop {
        model,
        cfg,
        stage: 1,
        trainable,
    }
    .run(&cached, &[], opts)
}

/// Stage 2: attach LoRA (if not yet attached) and train only its factors,
/// keeping the parameters with the lowest validation loss.
pub fn run_stage2(
    model: &mut Model,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    lora_cfg: &LoraConfig,
    opts: &mut StageOptions<'_>,
) -> Result<StageReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config(format!("no training samples with {} text", cfg.section)));
    }
    if val.is_empty() {
        return Err(Error::Config(format!("no validation samples with {} text", cfg.section)));
    }
    if model.lora.is_none() {
        model.attach_lora(lora_cfg, cfg.seed)?;
    }
    let mut trainable = lora::lora_names(&model.params);
    if cfg.train_adapter_in_stage2 {
        trainable.extend(adapter::stage_flags(1, &model.params)?.into_keys());
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let train_c = cache(model, train)?;
    let val_c = cache(model, val)?;
    Loop {
        model,
        cfg,
        stage: 2,
        trainable,
    }
    .run(&train_c, &val_c, opts)
}

/// Write `model` to `path` with stage metadata.
pub fn save_stage(model: &Model, path: &Path, stage: u8, cfg: &TrainConfig, extra: serde_json::Value) -> Result<()> {
    let mut meta = serde_json::json!({"stage": stage, "section": cfg.section});
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    model.to_checkpoint(meta).save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;
    use crate::fixtures::{memorization_examples, toy_lora_config, toy_model_config};

    fn small_cfg(batch: usize) -> TrainConfig {
        TrainConfig {
            lr_max: 1e-3,
            global_batch: batch,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    fn changed_prefixes(changed: &BTreeSet<String>) -> BTreeSet<String> {
        changed.iter().map(|n| n.split('.').next().unwrap().to_string()).collect()
    }

    #[test]
    fn step_counts() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.total_steps(1, 32), 2);
        assert_eq!(cfg.total_steps(2, 32), 6);
        assert_eq!(small_cfg(2).total_steps(1, 5), 3);
    }

    #[test]
    fn stage1_touches_only_adapter_and_handles_partial_batch() {
        let mut m = Model::new(toy_model_config(), 3).unwrap();
        let mut ex = memorization_examples(Section::Findings, 16);
        ex.push(ex[0].clone());
        let before = m.params.hashes();
        let r = run_stage1(&mut m, &ex, &small_cfg(2), &mut StageOptions::default()).unwrap();
        assert_eq!(r.steps, 3);
        assert_eq!(r.lrs.len(), 3);
        assert_eq!(*r.lrs.last().unwrap(), 0.0);
        let changed = changed_params(&before, &m.params);
        assert_eq!(changed_prefixes(&changed), BTreeSet::from(["adapter".to_string()]));
        assert_eq!(changed.len(), m.params.names().filter(|n| n.starts_with("adapter.")).count());
    }

    #[test]
    fn stage2_touches_only_lora_and_checkpoints_best() {
        let mut m = Model::new(toy_model_config(), 4).unwrap();
        let ex = memorization_examples(Section::Findings, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut log = Vec::new();
        let before = m.params.hashes();
        let r = {
            let mut opts = StageOptions {
                log: Some(&mut log),
                checkpoint_dir: Some(dir.path().to_path_buf()),
            };
            run_stage2(&mut m, &ex, &ex[..2], &small_cfg(2), &toy_lora_config(), &mut opts).unwrap()
        };
        assert_eq!(r.steps, 2 * 3);
        let changed = changed_params(&before, &m.params);
        // Existing tensors are untouched; the new ones are the LoRA factors.
        assert!(changed.iter().all(|n| n.starts_with("lora.")), "{changed:?}");
        assert!(!r.evals.is_empty());
        let (_, best) = r.best.unwrap();
        assert!(r.evals.iter().all(|&(_, l)| l >= best));
        let ck = Checkpoint::load(r.best_checkpoint.as_ref().unwrap()).unwrap();
        let restored = Model::from_checkpoint(&ck, None).unwrap();
        assert_eq!(restored.params, m.params);
        let again = evaluate_loss(&restored, &ex[..2]).unwrap();
        assert!((again - best).abs() < 1e-9, "{again} vs {best}");
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains("eval_loss")).count(), r.evals.len());
    }

    #[test]
    fn evaluate_is_pure_and_order_free() {
        let m = Model::new(toy_model_config(), 5).unwrap();
        let ex = memorization_examples(Section::Impressions, 16);
        let h = m.params.hashes();
        let a = evaluate_loss(&m, &ex).unwrap();
        assert_eq!(h, m.params.hashes());
        let mut rev = ex.clone();
        rev.reverse();
        assert!((a - evaluate_loss(&m, &rev).unwrap()).abs() < 1e-9);
        let doubled: Vec<_> = ex.iter().chain(&ex).cloned().collect();
        assert!((a - evaluate_loss(&m, &doubled).unwrap()).abs() < 1e-9);
        assert!(evaluate_loss(&m, &[]).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let ex = memorization_examples(Section::Findings, 16);
        let run = || {
            let mut m = Model::new(toy_model_config(), 9).unwrap();
            run_stage1(&mut m, &ex, &small_cfg(3), &mut StageOptions::default()).unwrap();
            run_stage2(&mut m, &ex, &ex, &small_cfg(3), &toy_lora_config(), &mut StageOptions::default()).unwrap();
            m.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_inputs_rejected() {
        let mut m = Model::new(toy_model_config(), 1).unwrap();
        let ex = memorization_examples(Section::Findings, 16);
        let cfg = small_cfg(2);
        assert!(run_stage1(&mut m, &[], &cfg, &mut StageOptions::default()).is_err());
        assert!(run_stage2(&mut m, &ex, &[], &cfg, &toy_lora_config(), &mut StageOptions::default()).is_err());
    }
}
