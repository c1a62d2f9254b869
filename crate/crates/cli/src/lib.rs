//! Command-line orchestration: phantom generation, both training phases,
//! prediction and evaluation, driven by one TOML run config.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crossmodal::data::nifti::{read_labels, write_labels};
use crossmodal::data::{discover, load_normalized, synth_phantom, PhantomConfig, SubjectRecord};
use crossmodal::metrics::{aggregate, evaluate_subject, MetricsReport, SubjectMetrics};
use crossmodal::train::cmff::{run_cmff, CmffConfig, CmffModel, InitMode, Variant};
use crossmodal::train::cmft::{pretrain_self_recon, run_cmft, CmftConfig};
use crossmodal::train::TrainingSet;

/// Overrides the configured output directory.
pub const OUTPUT_ENV: &str = "CROSSMODAL_OUTPUT";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Runtime(#[from] crossmodal::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(crossmodal::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Trained segmentation model.
    pub model: Option<PathBuf>,
    #[serde(default = "test_split")]
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Directory of `<subject>.nii.gz` label predictions.
    pub predictions: Option<PathBuf>,
    #[serde(default = "test_split")]
    pub split: String,
}

fn test_split() -> String {
    "test".into()
}

fn train_split() -> String {
    "train".into()
}

fn yes() -> bool {
    true
}

/// The whole run configuration. Each command reads only its own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Execution is single-threaded and seeded, so runs are always
    /// reproducible; the flag is recorded with the resolved config.
    #[serde(default = "yes")]
    pub strict_deterministic: bool,
    #[serde(default = "train_split")]
    pub train_split: String,
    pub synth: Option<PhantomConfig>,
    pub train_cmft: Option<CmftConfig>,
    pub train_cmff: Option<CmffConfig>,
    pub predict: Option<PredictConfig>,
    pub evaluate: Option<EvaluateConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            output_dir: None,
            strict_deterministic: true,
            train_split: train_split(),
            synth: None,
            train_cmft: None,
            train_cmff: None,
            predict: None,
            evaluate: None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossmodal", version, about = "Two-phase cross-modality brain tumor segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run config; flags given here override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset to the data root.
    Synth {
        #[arg(long)]
        n_subjects: Option<usize>,
    },
    /// Train the translation phase (or the self-reconstruction baseline).
    TrainCmft {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        self_recon: bool,
    },
    /// Train the segmentation phase.
    TrainCmff {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        cmft_checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long, value_parser = parse_init_mode)]
        init_mode: Option<InitMode>,
    },
    /// Write one predicted label volume per subject.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score a predictions directory against the ground truth.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    parse_enum(s)
}

fn parse_init_mode(s: &str) -> Result<InitMode, String> {
    parse_enum(s)
}

/// Reads the config file (if any) and applies the environment and flag
/// overrides, in that order of increasing precedence.
pub fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Validation(vec![format!("config: cannot read {}: {e}", path.display())]))?;
            toml::from_str(&text).map_err(|e| CliError::Validation(vec![format!("config: {e}")]))?
        }
        None => RunConfig::default(),
    };
    if let Ok(out) = std::env::var(OUTPUT_ENV) {
        if !out.is_empty() {
            cfg.output_dir = Some(PathBuf::from(out));
        }
    }
    let c = &cli.common;
    if c.data_root.is_some() {
        cfg.data_root = c.data_root.clone();
    }
    if c.output_dir.is_some() {
        cfg.output_dir = c.output_dir.clone();
    }
    match &cli.command {
        Command::Synth { n_subjects } => {
            let s = cfg.synth.get_or_insert_with(PhantomConfig::default);
            if let Some(n) = n_subjects {
                s.n_subjects = *n;
            }
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
        }
        Command::TrainCmft { .. } => {
            let s = cfg.train_cmft.get_or_insert_with(CmftConfig::default);
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
            if let Some(steps) = c.steps {
                s.steps = steps;
            }
        }
        Command::TrainCmff { cmft_checkpoint, variant, init_mode, .. } => {
            let s = cfg.train_cmff.get_or_insert_with(CmffConfig::default);
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
            if let Some(steps) = c.steps {
                s.steps = steps;
            }
            if cmft_checkpoint.is_some() {
                s.cmft_checkpoint = cmft_checkpoint.clone();
            }
            if let Some(v) = variant {
                s.variant = *v;
            }
            if let Some(m) = init_mode {
                s.init_mode = *m;
            }
        }
        Command::Predict { model } => {
            let s = cfg.predict.get_or_insert(PredictConfig { model: None, split: test_split() });
            if model.is_some() {
                s.model = model.clone();
            }
        }
        Command::Evaluate { predictions } => {
            let s = cfg.evaluate.get_or_insert(EvaluateConfig { predictions: None, split: test_split() });
            if predictions.is_some() {
                s.predictions = predictions.clone();
            }
        }
    }
    Ok(cfg)
}

fn require<'a>(errs: &mut Vec<String>, key: &str, v: &'a Option<PathBuf>) -> Option<&'a Path> {
    if v.is_none() {
        errs.push(format!("{key}: required"));
    }
    v.as_deref()
}

fn require_split(errs: &mut Vec<String>, key: &str, root: Option<&Path>, split: &str) {
    if let Some(root) = root {
        if !root.join(split).is_dir() {
            errs.push(format!("{key}: {} has no `{split}` directory", root.display()));
        }
    }
}

fn require_file(errs: &mut Vec<String>, key: &str, path: Option<&Path>) {
    if let Some(p) = path {
        if !p.is_file() {
            errs.push(format!("{key}: {} does not exist", p.display()));
        }
    }
}

fn prefixed(section: &str, issues: Vec<String>) -> impl Iterator<Item = String> + '_ {
    issues.into_iter().map(move |i| if i.starts_with(section) { i } else { format!("{section}.{i}") })
}

/// Every problem with the resolved config for `command`; nothing is
/// written before this returns empty.
pub fn validate(cfg: &RunConfig, command: &Command) -> Vec<String> {
    let mut errs = Vec::new();
    match command {
        Command::Synth { .. } => {
            require(&mut errs, "data_root", &cfg.data_root);
            errs.extend(cfg.synth.as_ref().map(|s| s.validate()).unwrap_or_default());
        }
        Command::TrainCmft { resume, .. } => {
            let root = require(&mut errs, "data_root", &cfg.data_root);
            require(&mut errs, "output_dir", &cfg.output_dir);
            require_split(&mut errs, "data_root", root, &cfg.train_split);
            let s = cfg.train_cmft.as_ref().expect("resolved");
            errs.extend(prefixed("train_cmft", s.validate()));
            require_file(&mut errs, "--resume", resume.as_deref());
        }
        Command::TrainCmff { resume, .. } => {
            let root = require(&mut errs, "data_root", &cfg.data_root);
            require(&mut errs, "output_dir", &cfg.output_dir);
            require_split(&mut errs, "data_root", root, &cfg.train_split);
            let s = cfg.train_cmff.as_ref().expect("resolved");
            errs.extend(prefixed("train_cmff", s.validate()));
            require_file(&mut errs, "--resume", resume.as_deref());
        }
        Command::Predict { .. } => {
            let root = require(&mut errs, "data_root", &cfg.data_root);
            require(&mut errs, "output_dir", &cfg.output_dir);
            let s = cfg.predict.as_ref().expect("resolved");
            require_split(&mut errs, "data_root", root, &s.split);
            let model = require(&mut errs, "predict.model", &s.model);
            require_file(&mut errs, "predict.model", model);
        }
        Command::Evaluate { .. } => {
            let root = require(&mut errs, "data_root", &cfg.data_root);
            require(&mut errs, "output_dir", &cfg.output_dir);
            let s = cfg.evaluate.as_ref().expect("resolved");
            require_split(&mut errs, "data_root", root, &s.split);
            let preds = require(&mut errs, "evaluate.predictions", &s.predictions);
            if let Some(p) = preds {
                if !p.is_dir() {
                    errs.push(format!("evaluate.predictions: {} is not a directory", p.display()));
                } else if let Some(root) = root.filter(|r| r.join(&s.split).is_dir()) {
                    match discover(root, &s.split) {
                        Ok(records) => {
                            let missing: Vec<&str> = records
                                .iter()
                                .filter(|r| !prediction_path(p, &r.subject_id).is_file())
                                .map(|r| r.subject_id.as_str())
                                .collect();
                            if !missing.is_empty() {
                                errs.push(format!("evaluate.predictions: no prediction for {}", missing.join(", ")));
                            }
                            if let Some(r) = records.iter().find(|r| r.label_path.is_none()) {
                                errs.push(format!("data_root: subject {} has no ground-truth label", r.subject_id));
                            }
                        }
                        Err(e) => errs.push(format!("data_root: {e}")),
                    }
                }
            }
        }
    }
    errs
}

pub fn prediction_path(dir: &Path, subject: &str) -> PathBuf {
    dir.join(format!("{subject}.nii.gz"))
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let text = toml::to_string(cfg).map_err(|e| CliError::Validation(vec![format!("config: cannot serialize: {e}")]))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, text).map_err(io_err(&path))
}

fn load_split(root: &Path, split: &str) -> CliResult<Vec<SubjectRecord>> {
    Ok(discover(root, split)?)
}

/// Writes the dataset and its manifest; returns the number of subjects.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<usize> {
    let root = cfg.data_root.as_deref().expect("validated");
    let synth = cfg.synth.as_ref().expect("resolved");
    let records = synth_phantom(synth, root)?;
    write_resolved(cfg, root)?;
    Ok(records.len())
}

pub fn cmd_train_cmft(cfg: &RunConfig, resume: Option<&Path>, self_recon: bool) -> CliResult<()> {
    let out = cfg.output_dir.as_deref().expect("validated");
    let data = TrainingSet::load(cfg.data_root.as_deref().expect("validated"), &cfg.train_split)?;
    write_resolved(cfg, out)?;
    let c = cfg.train_cmft.as_ref().expect("resolved");
    if self_recon {
        pretrain_self_recon(c, &data, Some(out))?;
    } else {
        run_cmft(c, &data, Some(out), resume)?;
    }
    Ok(())
}

pub fn cmd_train_cmff(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<()> {
    let out = cfg.output_dir.as_deref().expect("validated");
    let data = TrainingSet::load(cfg.data_root.as_deref().expect("validated"), &cfg.train_split)?;
    write_resolved(cfg, out)?;
    run_cmff(cfg.train_cmff.as_ref().expect("resolved"), &data, Some(out), resume)?;
    Ok(())
}

/// Returns the written prediction paths, in subject order.
pub fn cmd_predict(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let out = cfg.output_dir.as_deref().expect("validated");
    let p = cfg.predict.as_ref().expect("resolved");
    let model = CmffModel::load(p.model.as_deref().expect("validated"))?;
    let records = load_split(cfg.data_root.as_deref().expect("validated"), &p.split)?;
    write_resolved(cfg, out)?;
    let mut written = Vec::with_capacity(records.len());
    for r in &records {
        let subject = load_normalized(r)?;
        let seg = model.predict_subject(&subject)?;
        let path = prediction_path(out, &r.subject_id);
        write_labels(&path, &seg.final_labels)?;
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> CliResult<MetricsReport> {
    let out = cfg.output_dir.as_deref().expect("validated");
    let e = cfg.evaluate.as_ref().expect("resolved");
    let preds = e.predictions.as_deref().expect("validated");
    let records = load_split(cfg.data_root.as_deref().expect("validated"), &e.split)?;
    let mut subjects = Vec::with_capacity(records.len());
    for r in &records {
        let gt = read_labels(r.label_path.as_deref().expect("validated"))?;
        let pred = read_labels(&prediction_path(preds, &r.subject_id))?;
        subjects.push(SubjectMetrics { subject: r.subject_id.clone(), regions: evaluate_subject(&pred, &gt)? });
    }
    let report = aggregate(subjects)?;
    write_resolved(cfg, out)?;
    let path = out.join(METRICS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    report.write_csv(file)?;
    Ok(report)
}

/// Resolves, validates and runs one command.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = resolve(cli)?;
    let errs = validate(&cfg, &cli.command);
    if !errs.is_empty() {
        return Err(CliError::Validation(errs));
    }
    Ok(match &cli.command {
        Command::Synth { .. } => format!("wrote {} subjects", cmd_synth(&cfg)?),
        Command::TrainCmft { resume, self_recon } => {
            cmd_train_cmft(&cfg, resume.as_deref(), *self_recon)?;
            "training finished".into()
        }
        Command::TrainCmff { resume, .. } => {
            cmd_train_cmff(&cfg, resume.as_deref())?;
            "training finished".into()
        }
        Command::Predict { .. } => format!("wrote {} predictions", cmd_predict(&cfg)?.len()),
        Command::Evaluate { .. } => {
            let report = cmd_evaluate(&cfg)?;
            let mut s = String::new();
            for (region, m) in &report.per_region {
                s += &format!("{region:?}: dice {:.4} hd95 {:.3}\n", m.dice, m.hd95);
            }
            s + &format!("mean dice {:.4}", report.overall.dice)
        }
    })
}
