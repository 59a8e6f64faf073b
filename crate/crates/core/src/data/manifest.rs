use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Section, Split};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySample {
    pub study_id: String,
    #[serde(rename = "images")]
    pub image_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impressions: Option<String>,
    pub split: Split,
}

impl StudySample {
    pub fn section(&self, section: Section) -> Option<&str> {
        let text = match section {
            Section::Findings => self.findings.as_deref(),
            Section::Impressions => self.impressions.as_deref(),
        };
        text.filter(|t| !t.trim().is_empty())
    }
}

/// A manifest line that parsed as JSON but broke a sample invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub study_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub samples: Vec<StudySample>,
    pub rejections: Vec<Rejection>,
    /// Directory relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &StudySample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn resolve(&self, image: &str) -> PathBuf {
        let p = Path::new(image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    study_id: String,
    #[serde(default)]
    images: Vec<String>,
    #[serde(default)]
    findings: Option<String>,
    #[serde(default)]
    impressions: Option<String>,
    split: String,
}

/// Parse JSON-lines manifest text. Blank lines are skipped; line numbers
/// are 1-based.
pub fn parse_manifest(text: &str) -> Result<Manifest, DataError> {
    let mut m = Manifest::default();
    let mut seen = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let reject = |reason: String| Rejection {
            line: line_no,
            study_id: raw.study_id.clone(),
            reason,
        };
        let split = match raw.split.parse::<Split>() {
            Ok(s) => s,
            Err(e) => {
                m.rejections.push(reject(e));
                continue;
            }
        };
        if raw.images.is_empty() {
            m.rejections.push(reject(format!("study {} lists no images", raw.study_id)));
            continue;
        }
        let sample = StudySample {
            study_id: raw.study_id.clone(),
            image_paths: raw.images,
            findings: raw.findings,
            impressions: raw.impressions,
            split,
        };
        if sample.section(Section::Findings).is_none() && sample.section(Section::Impressions).is_none() {
            m.rejections
                .push(reject(format!("study {} has neither findings nor impressions", raw.study_id)));
            continue;
        }
        m.samples.push(sample);
    }
    if seen == 0 {
        return Err(DataError::EmptyCorpus);
    }
    Ok(m)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut m = parse_manifest(&text)?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_valid_line() {
        let m = parse_manifest(r#"{"study_id":"s1","images":["a.pgm"],"findings":"No acute disease.","split":"training"}"#)
            .unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(m.samples[0].section(Section::Findings), Some("No acute disease."));
        assert_eq!(m.samples[0].split, Split::Training);
    }

    #[test]
    fn missing_sections_rejected_by_study_id() {
        let m = parse_manifest(r#"{"study_id":"s9","images":["a.pgm"],"split":"training"}"#).unwrap();
        assert!(m.samples.is_empty());
        assert_eq!(m.rejections.len(), 1);
        assert_eq!(m.rejections[0].line, 1);
        assert!(m.rejections[0].reason.contains("s9"));
    }

    #[test]
    fn one_bad_line_of_three() {
        let text = [
            r#"{"study_id":"a","images":["1.pgm"],"findings":"x","split":"training"}"#,
            r#"{"study_id":"b","images":[],"findings":"y","split":"training"}"#,
            r#"{"study_id":"c","images":["2.pgm"],"impressions":"z","split":"validation"}"#,
        ]
        .join("\n");
        let m = parse_manifest(&text).unwrap();
        assert_eq!(m.samples.len(), 2);
        assert_eq!(m.rejections.len(), 1);
        assert_eq!(m.rejections[0].line, 2);
        assert_eq!(m.samples[1].study_id, "c");
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"study_id\":\"a\",\"images\":[\"x\"],\"findings\":\"f\",\"split\":\"training\"}\n{oops";
        match parse_manifest(text) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(matches!(parse_manifest("\n  \n"), Err(DataError::EmptyCorpus)));
    }
}
