use serde::{Deserialize, Serialize};

use super::tokenizer::{tokenize, tokenize_template, BOS_ID, EOS_ID, IMAGE_ID, PAD_ID};
use super::{DataError, Section, StudySample};

/// Text-token budget per sequence. Image patches are spliced in afterwards
/// and are not counted against it.
pub const MAX_TEXT_TOKENS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    Prompt,
    ImagePlaceholder,
    Response,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<TokenRole>,
    pub max_len: usize,
    /// Study the sequence was built from, for error messages.
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Loss is taken exactly on response tokens (report bytes and `<eos>`).
    pub fn loss_mask(&self) -> Vec<bool> {
        self.roles.iter().map(|&r| r == TokenRole::Response).collect()
    }

    pub fn placeholder_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == IMAGE_ID)
            .map(|(i, _)| i)
            .collect()
    }

    /// Right-pad with `<pad>` up to `len` (never past `max_len`).
    pub fn pad_to(&mut self, len: usize) {
        let len = len.min(self.max_len);
        while self.ids.len() < len {
            self.ids.push(PAD_ID);
            self.roles.push(TokenRole::Pad);
        }
    }
}

/// The instruction prompt for one report section.
pub fn render_prompt(section: Section) -> String {
    format!("Provide a description of the {} from the radiology <image>\n image.", section.as_str())
}

fn prompt_part(section: Section, source: &str) -> TokenSequence {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenize_template(&render_prompt(section)));
    let roles = ids
        .iter()
        .map(|&id| {
            if id == IMAGE_ID {
                TokenRole::ImagePlaceholder
            } else {
                TokenRole::Prompt
            }
        })
        .collect();
    TokenSequence {
        ids,
        roles,
        max_len: MAX_TEXT_TOKENS,
        source: source.to_string(),
    }
}

/// `<bos>` + prompt, the generation-time input.
pub fn build_prompt_sequence(section: Section, study_id: &str) -> TokenSequence {
    let mut seq = prompt_part(section, study_id);
    seq.ids.truncate(MAX_TEXT_TOKENS);
    seq.roles.truncate(MAX_TEXT_TOKENS);
    seq
}

/// `<bos>` + prompt + report + `<eos>`, cut from the right at 1024 tokens.
///
/// Returns `None` when the sample has no text for `section`.
pub fn build_training_sequence(sample: &StudySample, section: Section) -> Option<TokenSequence> {
    let report = sample.section(section)?;
    Some(training_sequence_from_text(report, section, &sample.study_id))
}

pub fn training_sequence_from_text(report: &str, section: Section, source: &str) -> TokenSequence {
    let mut seq = prompt_part(section, source);
    for id in tokenize(report).into_iter().chain([EOS_ID]) {
        seq.ids.push(id);
        seq.roles.push(TokenRole::Response);
    }
    seq.ids.truncate(MAX_TEXT_TOKENS);
    seq.roles.truncate(MAX_TEXT_TOKENS);
    seq
}

impl TryFrom<(&StudySample, Section)> for TokenSequence {
    type Error = DataError;

    fn try_from((sample, section): (&StudySample, Section)) -> Result<Self, Self::Error> {
        build_training_sequence(sample, section).ok_or_else(|| {
            DataError::Contract(format!("study {} has no {} text", sample.study_id, section))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn sample(findings: &str) -> StudySample {
        StudySample {
            study_id: "s1".into(),
            image_paths: vec!["a".into()],
            findings: Some(findings.into()),
            impressions: None,
            split: Split::Training,
        }
    }

    #[test]
    fn prompts_render_exactly() {
        assert_eq!(
            render_prompt(Section::Findings),
            "Provide a description of the findings from the radiology <image>\n image."
        );
        assert_eq!(
            render_prompt(Section::Impressions),
            "Provide a description of the impressions from the radiology <image>\n image."
        );
        assert_eq!(render_prompt(Section::Findings).matches("<image>").count(), 1);
    }

    #[test]
    fn tiny_report_layout() {
        let seq = build_training_sequence(&sample("ok"), Section::Findings).unwrap();
        let n = seq.len();
        assert_eq!(&seq.ids[n - 3..], &[b'o' as u32, b'k' as u32, EOS_ID]);
        assert!(seq.roles[n - 3..].iter().all(|&r| r == TokenRole::Response));
        assert_eq!(seq.ids[0], BOS_ID);
        assert_eq!(seq.placeholder_positions().len(), 1);
        let mask = seq.loss_mask();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        for (m, r) in mask.iter().zip(&seq.roles) {
            if *m {
                assert_eq!(*r, TokenRole::Response);
            }
        }
    }

    #[test]
    fn long_report_truncated_without_eos() {
        let seq = build_training_sequence(&sample(&"a".repeat(2000)), Section::Findings).unwrap();
        assert_eq!(seq.len(), MAX_TEXT_TOKENS);
        assert_eq!(*seq.ids.last().unwrap(), b'a' as u32);
        assert!(!seq.ids.contains(&EOS_ID));
    }

    #[test]
    fn missing_section_is_skip() {
        assert!(build_training_sequence(&sample("x"), Section::Impressions).is_none());
        assert!(TokenSequence::try_from((&sample("x"), Section::Impressions)).is_err());
    }
}
