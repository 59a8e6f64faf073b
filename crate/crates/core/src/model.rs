//! The assembled encoder → adapter → LM model and its checkpoint mapping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{build_prompt_sequence, detokenize, GrayImage, Section, TokenSequence, MAX_TEXT_TOKENS};
use crate::lm::{self, LMConfig, MAX_NEW_TOKENS};
use crate::lora::{self, LoraConfig};
use crate::nn::Binder;
use crate::params::{stream_rng, ParamSpec, Params, Stream};
use crate::tensor::{Graph, Tensor};
use crate::vision::{self, PatchFeatures, VisionConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub adapter: AdapterConfig,
    pub lm: LMConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.adapter.validate()?;
        self.lm.validate()?;
        if self.adapter.d_in != self.vision.d_vision {
            return Err(Error::Config(format!(
                "adapter d_in {} must equal d_vision {}",
                self.adapter.d_in, self.vision.d_vision
            )));
        }
        if self.adapter.d_out != self.lm.d_model {
            return Err(Error::Config(format!(
                "adapter d_out {} must equal lm d_model {}",
                self.adapter.d_out, self.lm.d_model
            )));
        }
        let need = MAX_TEXT_TOKENS + self.vision.num_patches();
        if self.lm.max_positions < need {
            return Err(Error::Config(format!(
                "lm max_positions {} is below {need} (text budget plus patches)",
                self.lm.max_positions
            )));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.vision.specs();
        v.extend(self.adapter.specs());
        v.extend(self.lm.specs());
        v
    }

    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.specs().into_iter().map(|s| (s.name, s.shape)).collect()
    }
}

/// Human-readable differences between `params` and what `config` expects.
/// LoRA factors are checked against their base weight and `rank`.
pub fn shape_diff(params: &Params, config: &ModelConfig, rank: Option<usize>) -> Vec<String> {
    let want = config.expected_shapes();
    let mut diffs = Vec::new();
    for (name, shape) in &want {
        match params.get(name) {
            None => diffs.push(format!("{name}: missing, expected {shape:?}")),
            Some(t) if t.shape() != shape.as_slice() => {
                diffs.push(format!("{name}: checkpoint {:?} vs config {shape:?}", t.shape()))
            }
            _ => {}
        }
    }
    for (name, t) in params.iter() {
        if want.contains_key(name) {
            continue;
        }
        let factor = name
            .strip_prefix("lora.A.")
            .map(|b| (b, true))
            .or_else(|| name.strip_prefix("lora.B.").map(|b| (b, false)));
        match (factor, rank) {
            (Some((base, is_a)), Some(r)) => match want.get(base) {
                Some(bs) => {
                    let expect = if is_a { vec![r, bs[1]] } else { vec![bs[0], r] };
                    if t.shape() != expect.as_slice() {
                        diffs.push(format!("{name}: checkpoint {:?} vs config {expect:?}", t.shape()));
                    }
                }
                None => diffs.push(format!("{name}: factor for unknown weight {base}")),
            },
            (Some(_), None) => diffs.push(format!("{name}: LoRA factor but no lora config")),
            (None, _) => diffs.push(format!("{name}: not part of config")),
        }
    }
    diffs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    /// Present once LoRA factors are attached.
    pub lora: Option<LoraConfig>,
}

impl Model {
    /// Fresh weights from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::from_specs(&config.specs(), &mut stream_rng(seed, Stream::Init));
        Ok(Self {
            config,
            params,
            lora: None,
        })
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora.as_ref().map_or(1.0, LoraConfig::scale)
    }

    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<Vec<String>> {
        if self.lora.is_some() {
            return Err(Error::Contract("LoRA factors are already attached".into()));
        }
        let targets = lora::attach(&mut self.params, cfg, seed)?;
        self.lora = Some(cfg.clone());
        Ok(targets)
    }

    /// Copy with every LoRA pair folded into its base weight.
    pub fn merged(&self) -> Result<Model> {
        Ok(Model {
            config: self.config.clone(),
            params: lora::merge(&self.params, self.lora_scale())?,
            lora: None,
        })
    }

    pub fn encode(&self, image: &GrayImage) -> Result<PatchFeatures> {
        vision::encode(image, &self.config.vision, &self.params)
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        adapter::project(features, &self.config.adapter, &self.params)
    }

    /// Adapter output for an encoder-sized image, `[patches × d_model]`.
    pub fn image_embeddings(&self, image: &GrayImage) -> Result<Tensor> {
        self.project(&self.encode(image)?.tokens)
    }

    /// Logits `[L × vocab]` for a sequence given precomputed image embeddings.
    pub fn logits(&self, seq: &TokenSequence, image_embeds: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params).with_lora_scale(self.lora_scale());
        let pe = g.constant(image_embeds.clone());
        let input = lm::splice(&mut b, &mut g, seq, pe)?;
        let out = lm::forward(&mut b, &mut g, &self.config.lm, &input)?;
        Ok(g.value(out).clone())
    }

    /// Masked mean loss and target count, `None` when nothing is masked in.
    pub fn loss(&self, seq: &TokenSequence, image_embeds: &Tensor) -> Result<Option<(f64, usize)>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params).with_lora_scale(self.lora_scale());
        let pe = g.constant(image_embeds.clone());
        let input = lm::splice(&mut b, &mut g, seq, pe)?;
        Ok(match lm::lm_loss(&mut b, &mut g, &self.config.lm, &input)? {
            Some((l, n)) => Some((g.value(l).item()? as f64, n)),
            None => None,
        })
    }

    /// Greedy report ids for an encoder-sized image.
    pub fn generate_ids(&self, image: &GrayImage, section: Section, study_id: &str) -> Result<Vec<u32>> {
        let embeds = self.image_embeddings(image)?;
        let prompt = build_prompt_sequence(section, study_id);
        lm::generate_greedy(&self.params, &self.config.lm, self.lora_scale(), &prompt, &embeds, MAX_NEW_TOKENS)
    }

    pub fn generate(&self, image: &GrayImage, section: Section, study_id: &str) -> Result<String> {
        Ok(detokenize(&self.generate_ids(image, section, study_id)?))
    }

    /// Header metadata describing the architecture; no paths or timestamps.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.config,
            "lora": self.lora,
            "vision_feature_layer": self.config.vision.feature_layer(),
            "vision_feature_final_norm": false,
        })
    }

    /// Checkpoint with [`Model::metadata`] plus the keys of `extra`.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut meta = self.metadata();
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Checkpoint::new(meta, self.params.clone())
    }

    /// Rebuild from a checkpoint, checking every tensor against the config
    /// recorded in it (or `expect`, when given).
    pub fn from_checkpoint(ck: &Checkpoint, expect: Option<&ModelConfig>) -> Result<Model> {
        let recorded: ModelConfig = match ck.metadata.get("model") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| CheckpointError::Header(format!("model config: {e}")))?,
            None => return Err(CheckpointError::Header("no model config in metadata".into()).into()),
        };
        let lora: Option<LoraConfig> = match ck.metadata.get("lora") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Header(format!("lora config: {e}")))?,
            ),
        };
        let config = expect.cloned().unwrap_or(recorded);
        config.validate()?;
        let diffs = shape_diff(&ck.params, &config, lora.as_ref().map(|l| l.rank));
        if !diffs.is_empty() {
            return Err(CheckpointError::Mismatch(diffs).into());
        }
        Ok(Model {
            config,
            params: ck.params.clone(),
            lora,
        })
    }

    /// Parameters under `prefix`, e.g. `"vision."`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.params.numel_with_prefix(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> ModelConfig {
        ModelConfig {
            vision: VisionConfig {
                image_side: 16,
                patch_size: 8,
                d_vision: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
            },
            adapter: AdapterConfig {
                d_in: 16,
                d_hidden: 16,
                d_out: 16,
                n_hidden_layers: 1,
            },
            lm: LMConfig {
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_positions: 1028,
                ..LMConfig::default()
            },
        }
    }

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig {
            adapter: AdapterConfig { d_out: 32, ..AdapterConfig::default() },
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn b_zero_attach_keeps_logits_bit_identical() {
        let mut m = Model::new(toy(), 5).unwrap();
        let img = GrayImage::from_fn(16, 16, |x, y| (x * 9 + y * 5) as u8);
        let e = m.image_embeddings(&img).unwrap();
        let seq = crate::data::training_sequence_from_text("clear lungs", Section::Findings, "s");
        let before = m.logits(&seq, &e).unwrap();
        m.attach_lora(&LoraConfig::default(), 5).unwrap();
        assert_eq!(before, m.logits(&seq, &e).unwrap());
        assert!(m.attach_lora(&LoraConfig::default(), 5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut m = Model::new(toy(), 1).unwrap();
        m.attach_lora(&LoraConfig::default(), 1).unwrap();
        let ck = Checkpoint::from_bytes(&m.to_checkpoint(serde_json::json!({"stage": 2})).to_bytes()).unwrap();
        assert_eq!(Model::from_checkpoint(&ck, None).unwrap(), m);
        let other = ModelConfig {
            lm: LMConfig { d_ff: 48, ..toy().lm },
            ..toy()
        };
        match Model::from_checkpoint(&ck, Some(&other)) {
            Err(Error::Checkpoint(CheckpointError::Mismatch(d))) => {
                assert!(d.iter().any(|l| l.contains("lm.blocks.0.mlp.fc1.weight")), "{d:?}")
            }
            other => panic!("{other:?}"),
        }
    }
}
