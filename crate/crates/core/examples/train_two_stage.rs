//! Overfit four synthetic studies: stage 1 trains only the adapter, stage 2
//! trains only LoRA factors. Then generate each report back from its image.

use cxrgen::data::Section;
use cxrgen::fixtures::{memorization_examples, toy_lora_config, toy_model_config, toy_train_config};
use cxrgen::train::{run_stage1, run_stage2, StageOptions};
use cxrgen::Model;

fn main() -> cxrgen::Result<()> {
    let cfg = toy_model_config();
    let examples = memorization_examples(Section::Findings, cfg.vision.image_side);
    let mut model = Model::new(cfg, 17)?;
    let train = toy_train_config();

    let r1 = run_stage1(&mut model, &examples, &train, &mut StageOptions::default())?;
    println!(
        "stage 1: {} steps over {:?}, loss {:.3} -> {:.3}",
        r1.steps,
        r1.trainable,
        r1.train_losses[0],
        r1.train_losses[r1.steps - 1]
    );
    let r2 = run_stage2(&mut model, &examples, &examples, &train, &toy_lora_config(), &mut StageOptions::default())?;
    let (step, loss) = r2.best.expect("stage 2 evaluates");
    println!("stage 2: {} steps over {} tensors, best loss {loss:.5} at step {step}", r2.steps, r2.trainable.len());

    for e in &examples {
        println!("{}: {:?}", e.study_id, model.generate(&e.image, Section::Findings, &e.study_id)?);
    }
    Ok(())
}
