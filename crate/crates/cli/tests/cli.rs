use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use clap::Parser;
use crossmodal::data::phantom::{Manifest, MANIFEST_NAME};
use crossmodal::train::cmff::{LOG_FILE as CMFF_LOG, MODEL_FILE};
use crossmodal::train::cmft::{GENERATORS_FILE, LOG_FILE as CMFT_LOG};
use crossmodal_cli::{prediction_path, run, Cli, CliError, METRICS_FILE, OUTPUT_ENV, RESOLVED_CONFIG};

const SMALL: &str = r#"
[synth]
grid_size = [32, 32, 32]
n_subjects = 3
n_test = 1
lesion_count_range = [1, 1]
noise_sigma = 0.03
seed = 5

[train_cmft]
base_filters = 2
depth = 1
steps = 3
lr = 1e-3
checkpoint_every = 0
patch = { size = [16, 16, 16], foreground_rule = "brain_overlap", seed = 1 }

[train_cmff]
init_mode = "random"
base_filters = 2
depth = 1
steps = 3
lr = 1e-3
checkpoint_every = 0
patch = { size = [16, 16, 16], foreground_rule = "tumor_overlap", seed = 2 }
"#;

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("crossmodal").chain(args.iter().copied())).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("data");
        let config = tmp.path().join("run.toml");
        fs::write(&config, SMALL).unwrap();
        Self { root, config, _tmp: tmp }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self._tmp.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Result<String, CliError> {
        let mut all = vec!["--config", p(&self.config), "--data-root", p(&self.root)];
        all.extend_from_slice(args);
        run(&cli(&all))
    }

    fn synth(&self) {
        self.run(&["synth"]).unwrap();
    }
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn synth_rerun_gives_identical_manifest_and_subject_count() {
    let f = Fixture::new();
    f.synth();
    let first = fs::read(f.root.join(MANIFEST_NAME)).unwrap();
    let manifest = Manifest::read(&f.root.join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.subjects.len(), 3);
    assert_eq!(manifest.subjects.iter().filter(|s| s.split == "test").count(), 1);
    f.synth();
    assert_eq!(fs::read(f.root.join(MANIFEST_NAME)).unwrap(), first);
    assert!(f.root.join(RESOLVED_CONFIG).is_file());
}

#[test]
fn synth_zero_subjects_writes_empty_manifest() {
    let f = Fixture::new();
    let msg = f.run(&["synth", "--n-subjects", "0"]);
    // n_test = 1 > 0 subjects is a validation error, so zero the test split too.
    assert!(matches!(msg, Err(CliError::Validation(_))));
    let cfg = f.dir("zero.toml");
    fs::write(&cfg, "[synth]\ngrid_size = [32, 32, 32]\nn_subjects = 0\nlesion_count_range = [1, 1]\nnoise_sigma = 0.0\nseed = 1\n")
        .unwrap();
    run(&cli(&["--config", p(&cfg), "--data-root", p(&f.root), "synth"])).unwrap();
    assert!(Manifest::read(&f.root.join(MANIFEST_NAME)).unwrap().subjects.is_empty());
}

#[test]
fn train_cmft_zero_steps_saves_initial_checkpoint() {
    let f = Fixture::new();
    f.synth();
    let out = f.dir("cmft");
    f.run(&["--output-dir", p(&out), "--steps", "0", "train-cmft"]).unwrap();
    assert!(out.join(GENERATORS_FILE).is_file());
    assert_eq!(line_count(&out.join(CMFT_LOG)), 0);
    assert!(fs::read_to_string(out.join(RESOLVED_CONFIG)).unwrap().contains("strict_deterministic = true"));
}

#[test]
fn train_logs_one_line_per_step() {
    let f = Fixture::new();
    f.synth();
    let cmft = f.dir("cmft");
    f.run(&["--output-dir", p(&cmft), "train-cmft"]).unwrap();
    assert_eq!(line_count(&cmft.join(CMFT_LOG)), 3);

    let cmff = f.dir("cmff");
    let ckpt = cmft.join(GENERATORS_FILE);
    f.run(&["--output-dir", p(&cmff), "--steps", "4", "train-cmff", "--init-mode", "cmft-transfer", "--cmft-checkpoint", p(&ckpt)])
        .unwrap();
    assert_eq!(line_count(&cmff.join(CMFF_LOG)), 4);
    assert!(cmff.join(MODEL_FILE).is_file());
}

#[test]
fn missing_cmft_checkpoint_is_a_validation_error_naming_the_key() {
    let f = Fixture::new();
    f.synth();
    let out = f.dir("cmff");
    let err = f.run(&["--output-dir", p(&out), "train-cmff", "--init-mode", "cmft-transfer"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("cmft_checkpoint"), "{err}");
    assert!(!out.exists(), "nothing may be written before validation passes");
}

#[test]
fn validation_lists_every_problem() {
    let f = Fixture::new();
    let err = run(&cli(&["--config", p(&f.config), "train-cmff", "--init-mode", "cmft-transfer"])).unwrap_err();
    let CliError::Validation(issues) = err else { panic!("expected validation error") };
    let text = issues.join("\n");
    for key in ["data_root", "output_dir", "cmft_checkpoint"] {
        assert!(text.contains(key), "{key} missing from:\n{text}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = Fixture::new();
    fs::write(&f.config, format!("{SMALL}\nbogus = 1\n")).unwrap();
    let err = f.run(&["synth"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("bogus"), "{err}");
}

#[test]
fn ground_truth_as_predictions_scores_perfectly_and_csv_reparses() {
    let f = Fixture::new();
    f.synth();
    let preds = f.dir("preds");
    fs::create_dir_all(&preds).unwrap();
    for entry in fs::read_dir(f.root.join("test")).unwrap() {
        let id = entry.unwrap().file_name().into_string().unwrap();
        fs::copy(f.root.join("test").join(&id).join(format!("{id}_seg.nii.gz")), prediction_path(&preds, &id)).unwrap();
    }
    let out = f.dir("eval");
    f.run(&["--output-dir", p(&out), "evaluate", "--predictions", p(&preds)]).unwrap();

    let mut rdr = csv::Reader::from_path(out.join(METRICS_FILE)).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let num = |r: &csv::StringRecord, i: usize| r[i].parse::<f64>().unwrap();
    let (subject_rows, aggregate_rows): (Vec<_>, Vec<_>) = rows.iter().partition(|r| &r[0] != "AGGREGATE");
    assert_eq!(subject_rows.len(), 3);
    assert!(subject_rows.iter().all(|r| num(r, 2) == 1.0 && num(r, 5) == 0.0));
    for agg in &aggregate_rows {
        let region = &agg[1];
        let members: Vec<_> = subject_rows.iter().filter(|r| region == "ALL" || &r[1] == region).collect();
        for col in 2..6 {
            let mean = members.iter().map(|r| num(r, col)).sum::<f64>() / members.len() as f64;
            assert!((num(agg, col) - mean).abs() < 1e-12, "{region} column {col}");
        }
    }
}

#[test]
fn evaluate_lists_missing_subjects() {
    let f = Fixture::new();
    f.synth();
    let preds = f.dir("preds");
    fs::create_dir_all(&preds).unwrap();
    let err = f.run(&["--output-dir", p(&f.dir("eval")), "evaluate", "--predictions", p(&preds)]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("phantom_002"), "{err}");
}

#[test]
fn predict_writes_one_file_per_subject_and_reruns_identically() {
    let f = Fixture::new();
    f.synth();
    let cmff = f.dir("cmff");
    f.run(&["--output-dir", p(&cmff), "train-cmff"]).unwrap();
    let model = cmff.join(MODEL_FILE);
    let outs: Vec<PathBuf> = ["pred1", "pred2"].iter().map(|d| f.dir(d)).collect();
    for out in &outs {
        f.run(&["--output-dir", p(out), "predict", "--model", p(&model)]).unwrap();
    }
    let written = |d: &Path| {
        let mut v: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).filter(|n| n != RESOLVED_CONFIG).collect();
        v.sort();
        v
    };
    assert_eq!(written(&outs[0]).len(), 1);
    assert_eq!(written(&outs[0]), written(&outs[1]));
    for name in written(&outs[0]) {
        assert_eq!(fs::read(outs[0].join(&name)).unwrap(), fs::read(outs[1].join(&name)).unwrap());
    }
}

#[test]
fn binary_exit_codes_and_output_env_override() {
    let f = Fixture::new();
    let bin = env!("CARGO_BIN_EXE_crossmodal");

    let status = Proc::new(bin).args(["predict"]).env_remove(OUTPUT_ENV).output().unwrap().status;
    assert_eq!(status.code(), Some(1));

    // A runtime failure: the data root is a file, so the dataset cannot be written.
    let file_root = f.dir("not_a_dir");
    fs::write(&file_root, "x").unwrap();
    let status = Proc::new(bin).args(["--config", p(&f.config), "--data-root", p(&file_root), "synth"]).output().unwrap().status;
    assert_eq!(status.code(), Some(2));

    f.synth();
    let from_env = f.dir("from_env");
    let status = Proc::new(bin)
        .args(["--config", p(&f.config), "--data-root", p(&f.root), "--steps", "0", "train-cmft"])
        .env(OUTPUT_ENV, &from_env)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(from_env.join(GENERATORS_FILE).is_file());

    let from_flag = f.dir("from_flag");
    let status = Proc::new(bin)
        .args(["--config", p(&f.config), "--data-root", p(&f.root), "--output-dir", p(&from_flag), "--steps", "0", "train-cmft"])
        .env(OUTPUT_ENV, f.dir("ignored"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(from_flag.join(GENERATORS_FILE).is_file());
    assert!(!f.dir("ignored").exists());
}
