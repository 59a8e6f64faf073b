//! Command-line entry point: stats, train, generate, evaluate, selfcheck.
//!
//! Exit codes: 0 ok, 1 failed self-check, 2 data/config/input error,
//! 3 stage ordering error, 4 checkpoint error, 5 alignment error.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{corpus_stats, encoder_input, load_manifest, load_study_images, DataError, Section, Split};
use crate::lora::LoraConfig;
use crate::metrics::{self, EvalOptions, RunInputs};
use crate::model::{Model, ModelConfig};
use crate::params::hash_bytes;
use crate::selfcheck::{parse_op_kind, run_selfcheck, SelfcheckOptions};
use crate::train::{prepare_examples, run_stage1, run_stage2, save_stage, StageOptions, StageReport, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SELFCHECK: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_STAGING: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_ALIGNMENT: i32 = 5;

/// Environment variable consulted when `train --out` is not given.
pub const OUT_DIR_ENV: &str = "CXRGEN_OUT_DIR";

/// Every configurable knob, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        self.train.validate()
    }
}

#[derive(Parser, Debug)]
#[command(name = "cxrgen", version, about = "Chest X-ray report generation: train, generate, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per split and section: sample counts, words per report, images per study.
    Stats(StatsArgs),
    /// Two-stage training of one section's model.
    Train(TrainArgs),
    /// Greedy report generation for every study of a split.
    Generate(GenerateArgs),
    /// Score predictions against references.
    Evaluate(EvaluateArgs),
    /// Gradient, freeze-ledger, LoRA-merge and scheduler checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Emit JSON instead of the text table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub section: Section,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: StageArg,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (falls back to $CXRGEN_OUT_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with `model`, `lora` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub global_batch: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: Split,
    #[arg(long)]
    pub section: Section,
    /// JSON-lines output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Check the checkpoint against this config's `model` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    /// JSON lines of {study_id, section, prediction, reference} 14-label vectors.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// JSON lines of {study_id, section, prediction, reference} entity lists.
    #[arg(long)]
    pub entities: Option<PathBuf>,
    /// JSON lines of {study_id, section, prediction, reference} token embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Dataset column of the report.
    #[arg(long, default_value = "custom")]
    pub split: String,
    /// Model column of the report (default: the per-section model name).
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated entity label set.
    #[arg(long, value_delimiter = ',')]
    pub entity_labels: Option<Vec<String>>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    /// Test hook: double the backward of one op (default gelu).
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "gelu")]
    pub inject_fault: Option<String>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Staging(_) => EXIT_STAGING,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Alignment(_) => EXIT_ALIGNMENT,
        _ => EXIT_DATA,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_DATA } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Stats(a) => cmd_stats(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Selfcheck(a) => return cmd_selfcheck(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    for r in &manifest.rejections {
        eprintln!("warning: line {}: skipped {}: {}", r.line, r.study_id, r.reason);
    }
    if manifest.samples.is_empty() {
        return Err(DataError::EmptyCorpus.into());
    }
    let stats = corpus_stats(&manifest.samples);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats.to_json())?);
    } else {
        print!("{}", stats.render_table());
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Config file, then flags, over the defaults.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    t.section = a.section;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(v) = a.lr_max {
        t.lr_max = v;
    }
    if let Some(v) = a.global_batch {
        t.global_batch = v;
    }
    if let Some(v) = a.stage1_epochs {
        t.stage1_epochs = v;
    }
    if let Some(v) = a.stage2_epochs {
        t.stage2_epochs = v;
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_summary(r: &StageReport) -> serde_json::Value {
    serde_json::json!({
        "steps": r.steps,
        "final_train_loss": r.train_losses.last(),
        "best_step": r.best.map(|b| b.0),
        "best_eval_loss": r.best.map(|b| b.1),
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let out = match (&a.out, std::env::var_os(OUT_DIR_ENV)) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::Config(format!("no --out given and {OUT_DIR_ENV} is unset"))),
    };
    let cfg = resolve_train_config(a)?;
    let section = cfg.train.section;
    let manifest = load_manifest(&a.manifest)?;
    let side = cfg.model.vision.image_side;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let stage1_path = out.join("stage1.ckpt");
    let log_path = out.join("train_log.jsonl");
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.stage == StageArg::Two)
        .truncate(a.stage != StageArg::Two)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut summaries = serde_json::Map::new();
    let mut artifacts = vec![("train_log", log_path.clone())];

    if a.stage != StageArg::Two {
        let train = prepare_examples(&manifest, Split::Training, section, side)?;
        let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
        let mut opts = StageOptions {
            log: Some(&mut log_file),
            checkpoint_dir: None,
        };
        let r = run_stage1(&mut model, &train, &cfg.train, &mut opts)?;
        save_stage(&model, &stage1_path, 1, &cfg.train, serde_json::json!({}))?;
        eprintln!("stage 1: {} steps, wrote {}", r.steps, stage1_path.display());
        summaries.insert("stage1".into(), stage_summary(&r));
        artifacts.push(("stage1", stage1_path.clone()));
    }

    if a.stage != StageArg::One {
        if !stage1_path.exists() {
            return Err(Error::Staging(format!(
                "stage 2 needs the stage-1 checkpoint {}; run --stage 1 first",
                stage1_path.display()
            )));
        }
        let ck = Checkpoint::load(&stage1_path)?;
        let recorded = ck.metadata.get("section").and_then(|v| v.as_str()).unwrap_or_default();
        if recorded != section.as_str() {
            return Err(Error::Staging(format!(
                "{} was trained for section {recorded:?}, not {section}",
                stage1_path.display()
            )));
        }
        if ck.metadata.get("stage").and_then(|v| v.as_u64()) != Some(1) {
            return Err(Error::Staging(format!("{} is not a stage-1 checkpoint", stage1_path.display())));
        }
        let mut model = Model::from_checkpoint(&ck, Some(&cfg.model))?;
        let train = prepare_examples(&manifest, Split::Training, section, side)?;
        let val = prepare_examples(&manifest, Split::Validation, section, side)?;
        let ck_dir = out.join("checkpoints");
        let mut opts = StageOptions {
            log: Some(&mut log_file),
            checkpoint_dir: Some(ck_dir),
        };
        let r = run_stage2(&mut model, &train, &val, &cfg.train, &cfg.lora, &mut opts)?;
        let best = out.join("best.ckpt");
        let (step, loss) = r.best.unwrap_or((r.steps, f64::NAN));
        save_stage(&model, &best, 2, &cfg.train, serde_json::json!({"step": step, "eval_loss": loss}))?;
        let merged_path = out.join("merged.ckpt");
        save_stage(&model.merged()?, &merged_path, 2, &cfg.train, serde_json::json!({"step": step, "merged": true}))?;
        eprintln!(
            "stage 2: {} steps, best validation loss {loss:.6} at step {step}, wrote {}",
            r.steps,
            best.display()
        );
        summaries.insert("stage2".into(), stage_summary(&r));
        artifacts.push(("best", best));
        artifacts.push(("merged", merged_path));
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log_file);

    let mut hashes = serde_json::Map::new();
    for (name, path) in &artifacts {
        hashes.insert(
            (*name).into(),
            serde_json::json!({"path": path, "sha256": sha256_file(path)?}),
        );
    }
    let run_manifest = serde_json::json!({
        "command": "train",
        "stage": format!("{:?}", a.stage).to_lowercase(),
        "section": section,
        "seed": cfg.train.seed,
        "config": cfg,
        "inputs": {
            "manifest": a.manifest,
            "manifest_sha256": sha256_file(&a.manifest)?,
            "config_file": a.config,
        },
        "out_dir": out,
        "artifacts": hashes,
        "stages": summaries,
    });
    let path = out.join("run_manifest.json");
    write_file(&path, (serde_json::to_string_pretty(&run_manifest)? + "\n").as_bytes())
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    study_id: &'a str,
    section: Section,
    text: String,
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let expect = match &a.config {
        Some(p) => Some(RunConfig::load(p)?.model),
        None => None,
    };
    let model = Model::from_checkpoint(&ck, expect.as_ref())?;
    let manifest = load_manifest(&a.manifest)?;
    let samples: Vec<_> = manifest.split(a.split).collect();
    if samples.is_empty() {
        return Err(DataError::Contract(format!("split {} has no studies", a.split)).into());
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    let side = model.config.vision.image_side;
    for s in &samples {
        let image = encoder_input(&load_study_images(&manifest, s)?, side)?;
        let text = model.generate(&image, a.section, &s.study_id)?;
        let line = PredictionLine {
            study_id: &s.study_id,
            section: a.section,
            text,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    eprintln!("wrote {} predictions to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    fn side<T: serde::de::DeserializeOwned>(p: &Option<PathBuf>) -> Result<Vec<T>> {
        match p {
            Some(p) => metrics::read_jsonl(p),
            None => Ok(Vec::new()),
        }
    }
    let inputs = RunInputs {
        predictions: metrics::read_jsonl(&a.predictions)?,
        references: metrics::read_jsonl(&a.references)?,
        labels: side(&a.labels)?,
        entities: side(&a.entities)?,
        embeddings: side(&a.embeddings)?,
    };
    let mut opts = EvalOptions {
        dataset: a.split.clone(),
        model: a.model.clone(),
        ..EvalOptions::default()
    };
    if let Some(l) = &a.entity_labels {
        opts.entity_labels = l.clone();
    }
    let rows = metrics::evaluate_run(inputs, &opts)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", metrics::render_report(&rows));
    }
    Ok(())
}

pub fn cmd_selfcheck(a: &SelfcheckArgs) -> i32 {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(name) => match parse_op_kind(name) {
            Some(k) => Some(k),
            None => {
                eprintln!("error: unknown op {name:?} for --inject-fault");
                return EXIT_DATA;
            }
        },
    };
    let (outcomes, secs) = run_selfcheck(&SelfcheckOptions { fault });
    for o in &outcomes {
        println!("{:<14} {}  {}", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed in {secs:.1}s", outcomes.len());
        EXIT_OK
    } else {
        eprintln!("selfcheck failed: {}", failed.join(", "));
        EXIT_SELFCHECK
    }
}
