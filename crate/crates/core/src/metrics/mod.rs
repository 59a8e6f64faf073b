//! Report-generation metrics: BLEU-4, ROUGE-L, label micro-F1, entity F1 and
//! greedy embedding F1, plus run-level alignment and the result table.

mod embed;
mod lexical;
mod overlap;

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Section};
use crate::{Error, Result};

pub use embed::{embed_f1, embed_f1_pair};
pub use lexical::{bleu4, lcs, lexical_tokens, rouge_l, rouge_l_pair, ROUGE_BETA};
pub use overlap::{entity_f1, f1_from_counts, label_micro_f1, Entity, NUM_LABELS};

/// Entity labels accepted by default: anatomy and observation with
/// definitely-present, uncertain and definitely-absent modifiers.
pub const DEFAULT_ENTITY_LABELS: [&str; 4] = ["ANAT-DP", "OBS-DP", "OBS-U", "OBS-DA"];

/// One aligned prediction/reference pair with whatever side data exists.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub study_id: String,
    pub section: Section,
    pub prediction: String,
    pub reference: String,
    pub labels: Option<(Vec<bool>, Vec<bool>)>,
    pub entities: Option<(Vec<Entity>, Vec<Entity>)>,
    pub embeddings: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl ScoredPair {
    pub fn new(study_id: &str, section: Section, prediction: &str, reference: &str) -> Self {
        Self {
            study_id: study_id.to_string(),
            section,
            prediction: prediction.to_string(),
            reference: reference.to_string(),
            labels: None,
            entities: None,
            embeddings: None,
        }
    }
}

/// Corpus scores in 0..=100; `None` when some pair lacks the inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub embed_f1: Option<f64>,
    pub label_micro_f1: Option<f64>,
    pub entity_f1: Option<f64>,
    /// Zero-norm embedding vectors left out of matching.
    pub embed_zero_vectors: usize,
}

fn all_present<'a, T: 'a>(items: impl Iterator<Item = &'a Option<T>>) -> Option<Vec<&'a T>> {
    items.map(Option::as_ref).collect()
}

/// Score a non-empty corpus of pairs.
pub fn score_pairs(pairs: &[ScoredPair]) -> Result<MetricReport> {
    let texts: Vec<(&str, &str)> = pairs.iter().map(|p| (p.prediction.as_str(), p.reference.as_str())).collect();
    let mut report = MetricReport {
        bleu4: Some(bleu4(&texts)?),
        rouge_l: Some(rouge_l(&texts)?),
        ..MetricReport::default()
    };
    if let Some(v) = all_present(pairs.iter().map(|p| &p.labels)) {
        report.label_micro_f1 = Some(label_micro_f1(&v.into_iter().cloned().collect::<Vec<_>>())?);
    }
    if let Some(v) = all_present(pairs.iter().map(|p| &p.entities)) {
        report.entity_f1 = Some(entity_f1(&v.into_iter().cloned().collect::<Vec<_>>()));
    }
    if let Some(v) = all_present(pairs.iter().map(|p| &p.embeddings)) {
        let (s, skipped) = embed_f1(&v.into_iter().cloned().collect::<Vec<_>>())?;
        report.embed_f1 = Some(s);
        report.embed_zero_vectors = skipped;
    }
    Ok(report)
}

/// A label entry: `true`/`false` or a number where positive means present.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Bool(bool),
    Number(f64),
}

impl LabelValue {
    pub fn positive(self) -> bool {
        match self {
            LabelValue::Bool(b) => b,
            LabelValue::Number(x) => x > 0.0,
        }
    }
}

/// An entity as `["surface", "LABEL"]` or `{"text": .., "label": ..}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntityValue {
    Pair(String, String),
    Object {
        #[serde(alias = "surface")]
        text: String,
        label: String,
    },
}

impl EntityValue {
    pub fn into_entity(self) -> Entity {
        match self {
            EntityValue::Pair(s, l) | EntityValue::Object { text: s, label: l } => (s, l),
        }
    }
}

/// A predictions or references line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub study_id: String,
    pub section: Section,
    #[serde(alias = "prediction", alias = "reference", alias = "report")]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<LabelValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<EntityValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
}

/// A side-file line carrying both sides of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideRecord<T> {
    pub study_id: String,
    pub section: Section,
    pub prediction: T,
    pub reference: T,
}

/// Parse JSON lines, skipping blank ones.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                DataError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::Data(DataError::Parse { line, msg }) => DataError::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        }
        .into(),
        other => other,
    })
}

/// Everything `evaluate_run` consumes.
#[derive(Clone, Debug, Default)]
pub struct RunInputs {
    pub predictions: Vec<TextRecord>,
    pub references: Vec<TextRecord>,
    pub labels: Vec<SideRecord<Vec<LabelValue>>>,
    pub entities: Vec<SideRecord<Vec<EntityValue>>>,
    pub embeddings: Vec<SideRecord<Vec<Vec<f64>>>>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Dataset column; typically the split name.
    pub dataset: String,
    /// Model column; defaults to the per-section model name.
    pub model: Option<String>,
    pub entity_labels: Vec<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            dataset: "custom".into(),
            model: None,
            entity_labels: DEFAULT_ENTITY_LABELS.map(String::from).to_vec(),
        }
    }
}

/// One result-table row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub section: Section,
    pub pairs: usize,
    #[serde(flatten)]
    pub scores: MetricReport,
}

type Key = (String, Section);

fn key_name(k: &Key) -> String {
    format!("{}/{}", k.0, k.1)
}

fn index<T>(items: Vec<T>, what: &str, key: impl Fn(&T) -> Key) -> Result<BTreeMap<Key, T>> {
    let mut m = BTreeMap::new();
    let mut dups = Vec::new();
    for it in items {
        match m.entry(key(&it)) {
            Entry::Occupied(e) => dups.push(format!("duplicate {what} {}", key_name(e.key()))),
            Entry::Vacant(e) => {
                e.insert(it);
            }
        }
    }
    if dups.is_empty() {
        Ok(m)
    } else {
        Err(Error::Alignment(dups))
    }
}

fn labels_vec(v: Vec<LabelValue>, k: &Key) -> Result<Vec<bool>> {
    if v.len() != NUM_LABELS {
        return Err(DataError::Contract(format!(
            "{}: label vector has {} entries, expected {NUM_LABELS}",
            key_name(k),
            v.len()
        ))
        .into());
    }
    Ok(v.into_iter().map(LabelValue::positive).collect())
}

fn entity_vec(v: Vec<EntityValue>, k: &Key, allowed: &[String]) -> Result<Vec<Entity>> {
    v.into_iter()
        .map(|e| {
            let (s, l) = e.into_entity();
            if allowed.iter().any(|a| a == &l) {
                Ok((s, l))
            } else {
                Err(DataError::Contract(format!(
                    "{}: entity label {l:?} is not in the declared set {allowed:?}",
                    key_name(k)
                ))
                .into())
            }
        })
        .collect()
}

fn pair_side<T, U>(p: Option<T>, r: Option<T>, f: impl Fn(T) -> Result<U>) -> Result<Option<(U, U)>> {
    Ok(match (p, r) {
        (Some(p), Some(r)) => Some((f(p)?, f(r)?)),
        _ => None,
    })
}

/// Align records on `(study_id, section)` and attach side data. Records or
/// side entries without a counterpart are an alignment error listing them.
pub fn align(inputs: RunInputs, opts: &EvalOptions) -> Result<Vec<ScoredPair>> {
    let key = |r: &TextRecord| (r.study_id.clone(), r.section);
    let mut preds = index(inputs.predictions, "prediction", key)?;
    let mut refs = index(inputs.references, "reference", key)?;
    let mut orphans: Vec<String> = Vec::new();
    for k in preds.keys().filter(|k| !refs.contains_key(*k)) {
        orphans.push(format!("prediction {}", key_name(k)));
    }
    for k in refs.keys().filter(|k| !preds.contains_key(*k)) {
        orphans.push(format!("reference {}", key_name(k)));
    }
    let skey = |s: &str, sec: Section| (s.to_string(), sec);
    let labels = index(inputs.labels, "labels entry", |r| skey(&r.study_id, r.section))?;
    let entities = index(inputs.entities, "entities entry", |r| skey(&r.study_id, r.section))?;
    let embeddings = index(inputs.embeddings, "embeddings entry", |r| skey(&r.study_id, r.section))?;
    for (what, keys) in [
        ("labels entry", labels.keys().collect::<Vec<_>>()),
        ("entities entry", entities.keys().collect()),
        ("embeddings entry", embeddings.keys().collect()),
    ] {
        for k in keys.into_iter().filter(|k| !(preds.contains_key(*k) && refs.contains_key(*k))) {
            orphans.push(format!("{what} {}", key_name(k)));
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Alignment(orphans));
    }
    if preds.is_empty() {
        return Err(DataError::EmptyCorpus.into());
    }
    let (mut labels, mut entities, mut embeddings) = (labels, entities, embeddings);
    let keys: Vec<Key> = preds.keys().cloned().collect();
    let mut out = Vec::with_capacity(keys.len());
    for k in keys {
        let p = preds.remove(&k).expect("aligned");
        let r = refs.remove(&k).expect("aligned");
        let mut pair = ScoredPair::new(&k.0, k.1, &p.text, &r.text);
        let (pl, rl) = match labels.remove(&k) {
            Some(s) => (Some(s.prediction), Some(s.reference)),
            None => (p.labels, r.labels),
        };
        pair.labels = pair_side(pl, rl, |v| labels_vec(v, &k))?;
        let (pe, re) = match entities.remove(&k) {
            Some(s) => (Some(s.prediction), Some(s.reference)),
            None => (p.entities, r.entities),
        };
        pair.entities = pair_side(pe, re, |v| entity_vec(v, &k, &opts.entity_labels))?;
        let (pm, rm) = match embeddings.remove(&k) {
            Some(s) => (Some(s.prediction), Some(s.reference)),
            None => (p.embeddings, r.embeddings),
        };
        pair.embeddings = pair_side(pm, rm, Ok)?;
        out.push(pair);
    }
    Ok(out)
}

/// Align, then score each section separately into one row per section.
pub fn evaluate_run(inputs: RunInputs, opts: &EvalOptions) -> Result<Vec<ReportRow>> {
    let pairs = align(inputs, opts)?;
    let mut rows = Vec::new();
    for section in Section::ALL {
        let group: Vec<ScoredPair> = pairs.iter().filter(|p| p.section == section).cloned().collect();
        if group.is_empty() {
            continue;
        }
        rows.push(ReportRow {
            model: opts.model.clone().unwrap_or_else(|| section.model_name().to_string()),
            dataset: opts.dataset.clone(),
            section,
            pairs: group.len(),
            scores: score_pairs(&group)?,
        });
    }
    Ok(rows)
}

pub const ABSENT: &str = "absent";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:.2}"))
}

/// Plain-text table with the columns Model, Dataset, Section, BLEU4, ROUGEL,
/// Bertscore, F1-cheXbert, F1-RadGraph.
pub fn render_report(rows: &[ReportRow]) -> String {
    let header = ["Model", "Dataset", "Section", "BLEU4", "ROUGEL", "Bertscore", "F1-cheXbert", "F1-RadGraph"];
    let mut table: Vec<Vec<String>> = vec![header.map(String::from).to_vec()];
    for r in rows {
        let s = &r.scores;
        table.push(vec![
            r.model.clone(),
            r.dataset.clone(),
            r.section.as_str().to_string(),
            cell(s.bleu4),
            cell(s.rouge_l),
            cell(s.embed_f1),
            cell(s.label_micro_f1),
            cell(s.entity_f1),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    for r in rows.iter().filter(|r| r.scores.embed_zero_vectors > 0) {
        out.push_str(&format!(
            "warning: {} {}: {} zero-norm embedding vectors skipped\n",
            r.model, r.section, r.scores.embed_zero_vectors
        ));
    }
    out
}
