//! Byte-level causal transformer: splicing, loss and greedy decoding.

use serde::{Deserialize, Serialize};

use crate::data::{TokenRole, TokenSequence, EOS_ID, IMAGE_ID, MAX_TEXT_TOKENS, VOCAB_SIZE};
use crate::nn::{block_specs, layer_norm_specs, linear_specs, Binder};
use crate::params::{ParamSpec, Params};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "lm.";
pub const MAX_NEW_TOKENS: usize = 150;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_positions: 1040,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the {VOCAB_SIZE} byte-level ids",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.d_model == 0 {
            return Err(Error::Config(format!("lm extents must be positive: {self:?}")));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "lm n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut v = vec![
            ParamSpec::normal("lm.embed", &[self.vocab_size, d]),
            ParamSpec::normal("lm.pos_embed", &[self.max_positions, d]),
        ];
        for i in 0..self.n_layers {
            v.extend(block_specs(&format!("lm.blocks.{i}"), d, self.d_ff));
        }
        v.extend(layer_norm_specs("lm.ln_final", d));
        v.extend(linear_specs("lm.head", d, self.vocab_size, false));
        v
    }
}

/// Prompt embeddings with the image placeholder replaced by patch embeddings.
#[derive(Clone, Debug)]
pub struct SplicedInput {
    pub embeddings: Var,
    /// Token id per spliced position; image positions carry the placeholder id.
    pub tokens: Vec<u32>,
    /// True where the token at that position is a response target.
    pub loss_mask: Vec<bool>,
    pub image_span: (usize, usize),
}

impl SplicedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn splice<F: Element>(
    b: &mut Binder<'_, F>,
    g: &mut Graph<F>,
    seq: &TokenSequence,
    patch_embeds: Var,
) -> Result<SplicedInput> {
    let ph = seq.placeholder_positions();
    if ph.len() != 1 {
        return Err(Error::Contract(format!(
            "study {}: expected exactly one image placeholder, found {}",
            seq.source,
            ph.len()
        )));
    }
    let at = ph[0];
    let p = g.value(patch_embeds).rows();
    let embed = b.var(g, "lm.embed")?;
    let ids = |r: &[u32]| r.iter().map(|&i| i as usize).collect::<Vec<_>>();
    let mut parts = Vec::with_capacity(3);
    if at > 0 {
        parts.push(g.gather_rows(embed, &ids(&seq.ids[..at]))?);
    }
    parts.push(patch_embeds);
    if at + 1 < seq.len() {
        parts.push(g.gather_rows(embed, &ids(&seq.ids[at + 1..]))?);
    }
    let embeddings = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

    let mut tokens = Vec::with_capacity(seq.len() - 1 + p);
    let mut loss_mask = Vec::with_capacity(seq.len() - 1 + p);
    for (i, (&id, &role)) in seq.ids.iter().zip(&seq.roles).enumerate() {
        if i == at {
            tokens.extend(std::iter::repeat_n(IMAGE_ID, p));
            loss_mask.extend(std::iter::repeat_n(false, p));
        } else {
            tokens.push(id);
            loss_mask.push(role == TokenRole::Response);
        }
    }
    Ok(SplicedInput {
        embeddings,
        tokens,
        loss_mask,
        image_span: (at, at + p),
    })
}

fn hidden<F: Element>(b: &mut Binder<'_, F>, g: &mut Graph<F>, cfg: &LMConfig, input: &SplicedInput) -> Result<Var> {
    let l = input.len();
    if l > cfg.max_positions {
        return Err(Error::Length {
            len: l,
            max: cfg.max_positions,
        });
    }
    let table = b.var(g, "lm.pos_embed")?;
    let pos = g.gather_rows(table, &(0..l).collect::<Vec<_>>())?;
    let mut x = g.add(input.embeddings, pos)?;
    for i in 0..cfg.n_layers {
        x = b.block(g, x, &format!("lm.blocks.{i}"), cfg.n_heads, true)?;
    }
    b.layer_norm(g, x, "lm.ln_final")
}

/// Logits `[L × vocab]`.
pub fn forward<F: Element>(b: &mut Binder<'_, F>, g: &mut Graph<F>, cfg: &LMConfig, input: &SplicedInput) -> Result<Var> {
    let h = hidden(b, g, cfg, input)?;
    b.linear(g, h, "lm.head")
}

/// Logits for the last position only, `[1 × vocab]`.
pub fn forward_last<F: Element>(
    b: &mut Binder<'_, F>,
    g: &mut Graph<F>,
    cfg: &LMConfig,
    input: &SplicedInput,
) -> Result<Var> {
    let h = hidden(b, g, cfg, input)?;
    let l = input.len();
    let last = g.slice_rows(h, l - 1, l)?;
    b.linear(g, last, "lm.head")
}

/// Next-token targets: logits row `i` predicts the token at `i + 1`.
pub fn shifted_targets(input: &SplicedInput) -> (Vec<usize>, Vec<bool>) {
    let l = input.len();
    let mut targets = vec![0usize; l];
    let mut mask = vec![false; l];
    for i in 0..l.saturating_sub(1) {
        targets[i] = input.tokens[i + 1] as usize;
        mask[i] = input.loss_mask[i + 1];
    }
    (targets, mask)
}

/// Number of loss targets `seq` contributes.
pub fn target_count(seq: &TokenSequence) -> usize {
    seq.roles.iter().skip(1).filter(|&&r| r == TokenRole::Response).count()
}

/// Masked mean cross-entropy and the number of targets it averages over;
/// `None` when nothing is masked in.
pub fn lm_loss<F: Element>(
    b: &mut Binder<'_, F>,
    g: &mut Graph<F>,
    cfg: &LMConfig,
    input: &SplicedInput,
) -> Result<Option<(Var, usize)>> {
    let (targets, mask) = shifted_targets(input);
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(None);
    }
    let logits = forward(b, g, cfg, input)?;
    Ok(Some((g.softmax_cross_entropy(logits, &targets, &mask)?, n)))
}

/// Index of the largest value, lowest index on ties.
/// Ids greedy decoding may produce: bytes and end-of-sequence. Padding,
/// begin-of-sequence and the image placeholder never appear in a report.
pub fn is_emittable(id: u32) -> bool {
    id < 256 || id == EOS_ID
}

/// Argmax restricted to [`is_emittable`] ids, lowest id on ties.
pub fn decode_argmax<F: Element>(row: &[F]) -> u32 {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if is_emittable(i as u32) && best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(EOS_ID as usize) as u32
}

pub fn argmax<F: Element>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding after `prompt`. Stops at `<eos>` (not included), after
/// `max_new_tokens`, or when the text budget or position table runs out.
pub fn generate_greedy(
    params: &Params,
    cfg: &LMConfig,
    lora_scale: f64,
    prompt: &TokenSequence,
    patch_embeds: &Tensor,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    let p = patch_embeds.rows();
    while out.len() < max_new_tokens && seq.len() < MAX_TEXT_TOKENS && seq.len() + p - 1 < cfg.max_positions {
        let mut g = Graph::new();
        let mut b = Binder::frozen(params).with_lora_scale(lora_scale);
        let pe = g.constant(patch_embeds.clone());
        let input = splice(&mut b, &mut g, &seq, pe)?;
        let logits = forward_last(&mut b, &mut g, cfg, &input)?;
        let next = decode_argmax(g.value(logits).data());
        if next == EOS_ID {
            break;
        }
        out.push(next);
        seq.ids.push(next);
        seq.roles.push(TokenRole::Response);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_prompt_sequence, training_sequence_from_text, Section, BOS_ID};
    use crate::params::{stream_rng, Stream};

    fn tiny() -> LMConfig {
        LMConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_positions: 200,
            ..LMConfig::default()
        }
    }

    fn weights(cfg: &LMConfig, seed: u64) -> Params {
        Params::from_specs(&cfg.specs(), &mut stream_rng(seed, Stream::Init))
    }

    fn seq(ids: &[u32], roles: &[TokenRole]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            roles: roles.to_vec(),
            max_len: MAX_TEXT_TOKENS,
            source: "t".into(),
        }
    }

    #[test]
    fn splice_length_and_span() {
        let cfg = tiny();
        let w = weights(&cfg, 0);
        use TokenRole::*;
        let s = seq(&[BOS_ID, IMAGE_ID, 97, 98], &[Prompt, ImagePlaceholder, Response, Response]);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&w);
        let pe = g.constant(Tensor::zeros(&[3, 8]));
        let sp = splice(&mut b, &mut g, &s, pe).unwrap();
        assert_eq!(sp.len(), 6);
        assert_eq!(g.shape(sp.embeddings), &[6, 8]);
        assert_eq!(sp.image_span, (1, 4));
        assert_eq!(sp.loss_mask, vec![false, false, false, false, true, true]);
    }

    #[test]
    fn splice_without_placeholder_names_study() {
        let w = weights(&tiny(), 0);
        let s = seq(&[BOS_ID, 97], &[TokenRole::Prompt, TokenRole::Response]);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&w);
        let pe = g.constant(Tensor::zeros(&[2, 8]));
        match splice(&mut b, &mut g, &s, pe) {
            Err(Error::Contract(m)) => assert!(m.contains("study t")),
            other => panic!("{other:?}"),
        }
    }

    fn logits_for(w: &Params, cfg: &LMConfig, s: &TokenSequence, pe: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut b = Binder::frozen(w);
        let pe = g.constant(pe.clone());
        let sp = splice(&mut b, &mut g, s, pe).unwrap();
        let l = forward(&mut b, &mut g, cfg, &sp).unwrap();
        g.value(l).clone()
    }

    #[test]
    fn causal_prefix_unaffected_by_suffix() {
        let cfg = tiny();
        let w = weights(&cfg, 4);
        let a = training_sequence_from_text("abc", Section::Findings, "t");
        let mut b = a.clone();
        let n = b.len();
        b.ids[n - 2] = b'z' as u32;
        let pe = Tensor::full(&[4, 8], 0.1);
        let la = logits_for(&w, &cfg, &a, &pe);
        let lb = logits_for(&w, &cfg, &b, &pe);
        let spliced_changed = n - 2 + 3;
        assert_eq!(la.shape(), &[n + 3, VOCAB_SIZE]);
        for r in 0..spliced_changed {
            assert_eq!(la.row(r), lb.row(r));
        }
        assert_ne!(la.row(spliced_changed), lb.row(spliced_changed));
    }

    #[test]
    fn image_embedding_reaches_response_logits() {
        let cfg = tiny();
        let s = training_sequence_from_text("ab", Section::Findings, "t");
        for seed in 0..4 {
            let w = weights(&cfg, seed);
            let pe = Tensor::full(&[4, 8], 0.1);
            let mut pe2 = pe.clone();
            pe2.data_mut()[5] = 2.0;
            let last = s.len() + 2;
            assert_ne!(logits_for(&w, &cfg, &s, &pe).row(last), logits_for(&w, &cfg, &s, &pe2).row(last));
        }
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let cfg = tiny();
        let w = weights(&cfg, 1);
        let s = training_sequence_from_text("no acute cardiopulmonary process.", Section::Findings, "t");
        let mut g = Graph::new();
        let mut b = Binder::frozen(&w);
        let pe = g.constant(Tensor::zeros(&[4, 8]));
        let sp = splice(&mut b, &mut g, &s, pe).unwrap();
        let (loss, n) = lm_loss(&mut b, &mut g, &cfg, &sp).unwrap().unwrap();
        assert_eq!(n, "no acute cardiopulmonary process.".len() + 1);
        let v = g.value(loss).item().unwrap() as f64;
        assert!((v - (260f64).ln()).abs() < 0.1, "{v}");
    }

    #[test]
    fn corrupting_prompt_targets_keeps_loss() {
        let cfg = tiny();
        let w = weights(&cfg, 2);
        let s = training_sequence_from_text("ok", Section::Findings, "t");
        let run = |corrupt: bool| {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&w);
            let pe = g.constant(Tensor::full(&[4, 8], 0.2));
            let mut sp = splice(&mut b, &mut g, &s, pe).unwrap();
            if corrupt {
                sp.tokens[3] = 42;
            }
            let (l, _) = lm_loss(&mut b, &mut g, &cfg, &sp).unwrap().unwrap();
            g.value(l).item().unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn empty_mask_is_skip() {
        let cfg = tiny();
        let w = weights(&cfg, 2);
        let s = build_prompt_sequence(Section::Findings, "t");
        let mut g = Graph::new();
        let mut b = Binder::frozen(&w);
        let pe = g.constant(Tensor::zeros(&[4, 8]));
        let sp = splice(&mut b, &mut g, &s, pe).unwrap();
        assert!(lm_loss(&mut b, &mut g, &cfg, &sp).unwrap().is_none());
    }

    #[test]
    fn over_length_is_error() {
        let cfg = LMConfig { max_positions: 10, ..tiny() };
        let w = weights(&cfg, 0);
        let s = build_prompt_sequence(Section::Findings, "t");
        let mut g = Graph::new();
        let mut b = Binder::frozen(&w);
        let pe = g.constant(Tensor::zeros(&[4, 8]));
        let sp = splice(&mut b, &mut g, &s, pe).unwrap();
        assert!(matches!(forward(&mut b, &mut g, &cfg, &sp), Err(Error::Length { .. })));
    }

    /// Final norm outputs a fixed one-hot row, so the head row for `favoured`
    /// decides every step.
    fn rigged(cfg: &LMConfig, favoured: Option<u32>) -> Params {
        let mut w = weights(cfg, 9);
        let d = cfg.d_model;
        *w.get_mut("lm.ln_final.gain").unwrap() = Tensor::zeros(&[d]);
        let mut bias = Tensor::zeros(&[d]);
        bias.data_mut()[0] = 1.0;
        *w.get_mut("lm.ln_final.bias").unwrap() = bias;
        let mut head = Tensor::zeros(&[cfg.vocab_size, d]);
        if let Some(t) = favoured {
            head.data_mut()[t as usize * d] = 5.0;
        }
        *w.get_mut("lm.head.weight").unwrap() = head;
        w
    }

    #[test]
    fn eos_rig_stops_immediately() {
        let cfg = tiny();
        let w = rigged(&cfg, Some(EOS_ID));
        let p = build_prompt_sequence(Section::Findings, "t");
        let out = generate_greedy(&w, &cfg, 1.0, &p, &Tensor::zeros(&[4, 8]), MAX_NEW_TOKENS).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn constant_rig_hits_cap() {
        let cfg = LMConfig { max_positions: 300, ..tiny() };
        let p = build_prompt_sequence(Section::Findings, "t");
        // all-zero head: every logit ties, lowest id wins
        let out = generate_greedy(&rigged(&cfg, None), &cfg, 1.0, &p, &Tensor::zeros(&[4, 8]), MAX_NEW_TOKENS).unwrap();
        assert_eq!(out.len(), MAX_NEW_TOKENS);
        assert!(out.iter().all(|&t| t == 0));
        let out = generate_greedy(&rigged(&cfg, Some(b'x' as u32)), &cfg, 1.0, &p, &Tensor::zeros(&[4, 8]), MAX_NEW_TOKENS)
            .unwrap();
        assert_eq!(out, vec![b'x' as u32; MAX_NEW_TOKENS]);
    }

    #[test]
    fn argmax_lowest_on_tie() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        let mut row = vec![0.0f32; VOCAB_SIZE];
        row[IMAGE_ID as usize] = 9.0;
        row[crate::data::BOS_ID as usize] = 8.0;
        row[70] = 1.0;
        row[71] = 1.0;
        assert_eq!(decode_argmax(&row), 70);
        row[EOS_ID as usize] = 2.0;
        assert_eq!(decode_argmax(&row), EOS_ID);
    }
}
