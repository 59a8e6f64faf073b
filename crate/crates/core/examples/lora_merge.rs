//! Attach LoRA factors, show the zero-init identity, then merge trained-looking
//! factors into the base weights and compare outputs.

use cxrgen::data::{training_sequence_from_text, Section};
use cxrgen::fixtures::{pattern_image, toy_model_config};
use cxrgen::lora::{delta, numerical_rank, LoraConfig};
use cxrgen::Model;

fn max_diff(a: &cxrgen::Tensor, b: &cxrgen::Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn main() -> cxrgen::Result<()> {
    let cfg = toy_model_config();
    let mut model = Model::new(cfg.clone(), 1)?;
    let image = pattern_image(2, cfg.vision.image_side, cfg.vision.image_side);
    let seq = training_sequence_from_text("lungs are clear.", Section::Findings, "demo");
    let embeds = model.image_embeddings(&image)?;
    let base = model.logits(&seq, &embeds)?;

    let lora = LoraConfig { rank: 2, alpha: 4.0, ..LoraConfig::default() };
    let targets = model.attach_lora(&lora, 1)?;
    println!("adapted {} weights, e.g. {}", targets.len(), targets[0]);
    println!("B = 0 changes nothing: {}", model.logits(&seq, &embeds)? == base);

    for (i, name) in targets.iter().enumerate() {
        let b = model.params.get_mut(&format!("lora.B.{name}")).expect("attached");
        b.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = ((i + j) % 7) as f32 * 0.01 - 0.03);
    }
    let unmerged = model.logits(&seq, &embeds)?;
    let merged = model.merged()?;
    println!("merged vs unmerged max |diff|: {:.2e}", max_diff(&unmerged, &merged.logits(&seq, &embeds)?));

    let name = &targets[0];
    let d = delta(
        model.params.get(&format!("lora.A.{name}")).expect("attached"),
        model.params.get(&format!("lora.B.{name}")).expect("attached"),
        model.lora_scale(),
    )?;
    println!("update {:?} has numerical rank {} (r = {})", d.shape(), numerical_rank(&d, 1e-6), lora.rank);
    Ok(())
}
