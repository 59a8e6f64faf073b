//! Score predicted reports against references with the lexical metrics plus
//! label and entity overlap supplied inline.

use cxrgen::metrics::{evaluate_run, parse_jsonl, render_report, EvalOptions, RunInputs};

const PREDICTIONS: &str = r#"
{"study_id": "s1", "section": "findings", "text": "no acute cardiopulmonary process.", "labels": [0,0,0,0,0,0,0,0,0,0,0,0,0,1], "entities": [["cardiopulmonary", "ANAT-DP"]]}
{"study_id": "s2", "section": "findings", "text": "small left pleural effusion.", "labels": [0,0,0,0,0,0,0,0,0,1,0,0,0,0], "entities": [["effusion", "OBS-DP"], ["left", "ANAT-DP"]]}
"#;

const REFERENCES: &str = r#"
{"study_id": "s1", "section": "findings", "text": "no acute cardiopulmonary abnormality.", "labels": [0,0,0,0,0,0,0,0,0,0,0,0,0,1], "entities": [["cardiopulmonary", "ANAT-DP"]]}
{"study_id": "s2", "section": "findings", "text": "small left pleural effusion is present.", "labels": [0,0,0,0,0,0,0,0,0,1,0,0,0,0], "entities": [["effusion", "OBS-DP"], ["pleural", "ANAT-DP"]]}
"#;

fn main() -> cxrgen::Result<()> {
    let inputs = RunInputs {
        predictions: parse_jsonl(PREDICTIONS.trim())?,
        references: parse_jsonl(REFERENCES.trim())?,
        ..RunInputs::default()
    };
    let rows = evaluate_run(inputs, &EvalOptions::default())?;
    print!("{}", render_report(&rows));
    Ok(())
}
