use std::fmt::Write as _;

use serde::Serialize;

use super::{Section, Split, StudySample};

/// Summary for one (split, section) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellStats {
    pub count: usize,
    pub word_mean: Option<f64>,
    pub word_std: Option<f64>,
    pub img_mean: Option<f64>,
    pub img_std: Option<f64>,
}

/// Split × section grid of counts, word-count and image-count moments.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    cells: Vec<(Split, Section, CellStats)>,
}

/// Mean and sample standard deviation from exact integer sums, so the
/// result does not depend on sample order.
fn moments(values: &[u64]) -> (Option<f64>, Option<f64>) {
    let n = values.len() as u128;
    if n == 0 {
        return (None, None);
    }
    let s: u128 = values.iter().map(|&v| v as u128).sum();
    let s2: u128 = values.iter().map(|&v| (v as u128) * (v as u128)).sum();
    let mean = s as f64 / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let num = n * s2 - s * s;
    let var = num as f64 / (n * (n - 1)) as f64;
    (Some(mean), Some(var.sqrt()))
}

pub fn corpus_stats(samples: &[StudySample]) -> CorpusStats {
    let mut cells = Vec::with_capacity(8);
    for split in Split::ALL {
        for section in Section::ALL {
            let mut words = Vec::new();
            let mut images = Vec::new();
            for s in samples.iter().filter(|s| s.split == split) {
                if let Some(text) = s.section(section) {
                    words.push(text.split_whitespace().count() as u64);
                    images.push(s.image_paths.len() as u64);
                }
            }
            let (word_mean, word_std) = moments(&words);
            let (img_mean, img_std) = moments(&images);
            cells.push((
                split,
                section,
                CellStats {
                    count: words.len(),
                    word_mean,
                    word_std,
                    img_mean,
                    img_std,
                },
            ));
        }
    }
    CorpusStats { cells }
}

fn mean_std(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (None, _) => "-".to_string(),
        (Some(m), None) => format!("{m:.2} (±-)"),
        (Some(m), Some(s)) => format!("{m:.2} (±{s:.2})"),
    }
}

impl CorpusStats {
    pub fn get(&self, split: Split, section: Section) -> &CellStats {
        self.cells
            .iter()
            .find(|(sp, se, _)| *sp == split && *se == section)
            .map(|(_, _, c)| c)
            .expect("grid covers every split and section")
    }

    pub fn cells(&self) -> impl Iterator<Item = (Split, Section, &CellStats)> {
        self.cells.iter().map(|(a, b, c)| (*a, *b, c))
    }

    /// Three aligned tables: sample counts, word counts, image counts.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let blocks: [(&str, fn(&CellStats) -> String); 3] = [
            ("Samples per split", |c| c.count.to_string()),
            ("Words per report, mean (±std)", |c| mean_std(c.word_mean, c.word_std)),
            ("Images per study, mean (±std)", |c| mean_std(c.img_mean, c.img_std)),
        ];
        for (bi, (title, cell)) in blocks.iter().enumerate() {
            if bi > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "{title}");
            let _ = writeln!(out, "{:<13}{:>20}{:>20}", "split", "FINDINGS", "IMPRESSIONS");
            for split in Split::ALL {
                let f = cell(self.get(split, Section::Findings));
                let i = cell(self.get(split, Section::Impressions));
                let _ = writeln!(out, "{:<13}{:>20}{:>20}", split.as_str(), f, i);
            }
        }
        out
    }

    /// `split → section → {count, word_mean, word_std, img_mean, img_std}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut root = serde_json::Map::new();
        for split in Split::ALL {
            let mut inner = serde_json::Map::new();
            for section in Section::ALL {
                inner.insert(
                    section.as_str().to_string(),
                    serde_json::to_value(self.get(split, section)).expect("plain struct"),
                );
            }
            root.insert(split.as_str().to_string(), serde_json::Value::Object(inner));
        }
        serde_json::Value::Object(root)
    }
}
