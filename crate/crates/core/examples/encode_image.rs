//! Encode one image into patch features and project them into the language
//! model's embedding space.

use cxrgen::fixtures::{pattern_image, toy_model_config};
use cxrgen::Model;

fn main() -> cxrgen::Result<()> {
    let cfg = toy_model_config();
    let model = Model::new(cfg.clone(), 0)?;
    let image = pattern_image(3, cfg.vision.image_side, cfg.vision.image_side);

    let features = model.encode(&image)?;
    println!(
        "patch features: {:?} taken after block {} of {}",
        features.tokens.shape(),
        features.layer,
        cfg.vision.n_layers
    );
    let embeds = model.project(&features.tokens)?;
    println!("image embeddings: {:?}", embeds.shape());
    println!(
        "parameters: vision {}, adapter {}, lm {}",
        model.count_params("vision."),
        model.count_params("adapter."),
        model.count_params("lm.")
    );
    Ok(())
}
