//! Synthetic studies and small configurations for tests, examples and demos.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::AdapterConfig;
use crate::data::{encode_pgm, GrayImage, Section};
use crate::lm::LMConfig;
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::train::{Example, TrainConfig};
use crate::vision::VisionConfig;
use crate::{Error, Result};

/// A model small enough to overfit a handful of studies in seconds.
pub fn toy_model_config() -> ModelConfig {
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
            d_hidden: 32,
            d_out: 32,
            n_hidden_layers: 1,
        },
        lm: LMConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_positions: 1028,
            ..LMConfig::default()
        },
    }
}

/// The smallest useful model (d_model 16, two layers), for gradient checks.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = toy_model_config();
    cfg.adapter.d_hidden = 16;
    cfg.adapter.d_out = 16;
    cfg.lm.d_model = 16;
    cfg.lm.d_ff = 32;
    cfg
}

/// LoRA on every LM projection including the output head.
pub fn toy_lora_config() -> LoraConfig {
    LoraConfig {
        rank: 16,
        alpha: 32.0,
        targets: ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2", "head"]
            .map(String::from)
            .to_vec(),
    }
}

/// Schedule for overfitting a few studies.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        lr_max: 3e-3,
        global_batch: 4,
        stage1_epochs: 200,
        stage2_epochs: 1500,
        eval_every: 100,
        ..TrainConfig::default()
    }
}

/// Distinct deterministic test pattern number `kind`.
pub fn pattern_image(kind: usize, width: usize, height: usize) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        let v = match kind % 6 {
            0 => (x * 255 / width.max(1)) as u32,
            1 => (y * 255 / height.max(1)) as u32,
            2 => {
                if (x / 4 + y / 4) % 2 == 0 {
                    230
                } else {
                    20
                }
            }
            3 => {
                let (cx, cy) = (width as i64 / 2, height as i64 / 2);
                let d = (x as i64 - cx).pow(2) + (y as i64 - cy).pow(2);
                if d < (width as i64 * width as i64) / 9 {
                    240
                } else {
                    10
                }
            }
            4 => ((x + y) * 255 / (width + height).max(1)) as u32,
            _ => {
                if x % 3 == 0 {
                    200
                } else {
                    60
                }
            }
        };
        (v.min(255) as u8).wrapping_add((kind / 6) as u8 * 17)
    })
}

/// Four studies with distinct images and short distinct reports.
pub fn memorization_examples(section: Section, side: usize) -> Vec<Example> {
    const REPORTS: [&str; 4] = [
        "no acute disease.",
        "small left effusion.",
        "heart is enlarged.",
        "right basilar opacity.",
    ];
    REPORTS
        .iter()
        .enumerate()
        .map(|(i, r)| Example::new(format!("mem-{i}"), pattern_image(i, side, side), r, section))
        .collect()
}

const PHRASES: [&str; 12] = [
    "no acute cardiopulmonary process.",
    "lungs are clear.",
    "heart size is normal.",
    "small left pleural effusion.",
    "mild cardiomegaly.",
    "no pneumothorax.",
    "right lower lobe opacity.",
    "stable mediastinal contours.",
    "degenerative changes of the spine.",
    "support devices in place.",
    "low lung volumes.",
    "no focal consolidation.",
];

fn report(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| PHRASES[rng.random_range(0..PHRASES.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Write a synthetic corpus of PGM images plus `manifest.jsonl` into `dir`.
///
/// `counts` gives the number of studies per split in the order training,
/// validation, test-public. Studies list one to six images; about one in
/// five lacks impressions.
pub fn write_synthetic_corpus(dir: &Path, counts: [usize; 3], seed: u64) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    let splits = ["training", "validation", "test-public"];
    let mut k = 0usize;
    for (split, &n) in splits.iter().zip(&counts) {
        for _ in 0..n {
            let id = format!("study-{k:04}");
            let n_img = rng.random_range(1..=6);
            let mut images = Vec::new();
            for j in 0..n_img {
                let (w, h) = (rng.random_range(12..=40), rng.random_range(12..=40));
                let img = pattern_image(k + j, w, h);
                let rel = format!("images/{id}_{j}.pgm");
                let path = dir.join(&rel);
                std::fs::write(&path, encode_pgm(&img)).map_err(|e| Error::io(&path, e))?;
                images.push(rel);
            }
            let mut rec = serde_json::json!({
                "study_id": id,
                "images": images,
                "findings": report(&mut rng),
                "split": split,
            });
            if rng.random_range(0..5) != 0 {
                rec["impressions"] = serde_json::Value::String(report(&mut rng));
            }
            lines.push(rec.to_string());
            k += 1;
        }
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, lines.join("\n") + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_small_and_valid() {
        let cfg = toy_model_config();
        cfg.validate().unwrap();
        let n: usize = cfg.specs().iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert!(n < 150_000, "{n}");
    }

    #[test]
    fn tiny_config_is_valid() {
        let cfg = tiny_model_config();
        cfg.validate().unwrap();
        assert_eq!((cfg.lm.d_model, cfg.lm.n_layers), (16, 2));
    }

    #[test]
    fn patterns_differ() {
        let imgs: Vec<_> = (0..6).map(|k| pattern_image(k, 16, 16)).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }
}
