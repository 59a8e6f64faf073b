//! Turn a six-image study into one encoder input: keep the first four views,
//! stitch them side by side at a common height, then resize to a square.

use cxrgen::data::{encode_pgm, encoder_input, stitch_horizontal, MAX_STUDY_IMAGES};
use cxrgen::fixtures::pattern_image;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let views: Vec<_> = (0..6).map(|k| pattern_image(k, 20 + 4 * k, 24 + 2 * k)).collect();
    for (i, v) in views.iter().enumerate() {
        println!("view {i}: {}x{}", v.width(), v.height());
    }
    let kept = &views[..MAX_STUDY_IMAGES];
    let strip = stitch_horizontal(kept, kept[0].height())?;
    println!("stitched {} views: {}x{}", kept.len(), strip.width(), strip.height());
    let square = encoder_input(kept, 32)?;
    println!("encoder input: {}x{}", square.width(), square.height());

    let out = std::env::temp_dir().join("stitched_study.pgm");
    std::fs::write(&out, encode_pgm(&square))?;
    println!("wrote {}", out.display());
    Ok(())
}
