//! Show the prompt layout and run greedy decoding, optionally from a
//! checkpoint written by `cxrgen train`:
//!
//!     cargo run --example generate_report -- out/best.ckpt

use cxrgen::data::{build_prompt_sequence, render_prompt, Section};
use cxrgen::fixtures::{pattern_image, toy_model_config};
use cxrgen::{Checkpoint, Model};

fn main() -> cxrgen::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => Model::from_checkpoint(&Checkpoint::load(&path)?, None)?,
        None => Model::new(toy_model_config(), 0)?,
    };
    let section = Section::Impressions;
    println!("prompt: {:?}", render_prompt(section));
    let seq = build_prompt_sequence(section, "demo");
    println!("prompt tokens: {} ({} image placeholder)", seq.len(), seq.placeholder_positions().len());

    let side = model.config.vision.image_side;
    let image = pattern_image(1, side, side);
    let ids = model.generate_ids(&image, section, "demo")?;
    println!("generated {} tokens: {:?}", ids.len(), model.generate(&image, section, "demo")?);
    Ok(())
}
