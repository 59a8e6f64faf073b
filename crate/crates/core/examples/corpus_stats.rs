//! Write a small synthetic corpus and print its per-split statistics.

use cxrgen::data::{corpus_stats, load_manifest};
use cxrgen::fixtures::write_synthetic_corpus;

fn main() -> cxrgen::Result<()> {
    let dir = std::env::temp_dir().join("cxrgen_corpus_example");
    let path = write_synthetic_corpus(&dir, [40, 8, 8], 7)?;
    let manifest = load_manifest(&path)?;
    println!("{} studies from {}\n", manifest.samples.len(), path.display());
    print!("{}", corpus_stats(&manifest.samples).render_table());
    Ok(())
}
