use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use trace_seq::manifest::RunManifest;
use trace_seq::settings::parse_config;
use trace_seq::{parse_threads, CliError};

const TINY: &str = r#"
seed = 3
variant = "LR"

[generator]
population = 700

[pretrain_corpus]
population = 200

[cohort]
max_cases = 20

[code2vec]
dim = 4
epochs = 1

[model]
n_reduced = 3
dim = 4
baseline_hidden = 4

[training]
epochs = 2
batch_size = 20

[autoencoder]
epochs = 1
"#;

fn trace_seq(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trace-seq"));
    cmd.arg("--quiet").arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).env_remove("TRACE_SEQ_THREADS").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn empty_file_yields_the_reference_defaults() {
    let cfg = parse_config("").unwrap();
    assert_eq!(cfg.model.n_reduced, 100);
    assert_eq!(cfg.model.dim, 128);
    assert_eq!(cfg.model.dropout, 0.5);
    assert_eq!(cfg.training.batch_size, 100);
    assert_eq!(cfg.training.epochs, 50);
    assert_eq!(cfg.training.max_visits, 30);
    assert_eq!(cfg.optimizer.lr, 1.0);
    assert_eq!(cfg.optimizer.rho, 0.95);
    assert_eq!(cfg.optimizer.eps, 1e-6);
    assert_eq!(cfg.cohort.controls_per_case, 6);
    assert_eq!(cfg.code2vec.window, 1);
}

#[test]
fn validate_config_prints_a_reloadable_document() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "");
    let out = trace_seq(&["validate-config"], Some(&path), dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let printed = String::from_utf8(out.stdout).unwrap();
    let reparsed = parse_config(&printed).unwrap();
    let mut expected = parse_config("").unwrap();
    expected.output_dir = dir.path().to_string_lossy().into_owned();
    assert_eq!(reparsed, expected);
}

#[test]
fn out_of_range_dropout_exits_three_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "[model]\ndropout = 1.5\n");
    let out = trace_seq(&["validate-config"], Some(&path), dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("model.dropout"), "{}", stderr(&out));
}

#[test]
fn unknown_key_exits_three_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "[training]\nepochz = 3\n");
    let out = trace_seq(&["validate-config"], Some(&path), dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("training") && err.contains("epochz"), "{err}");
}

#[test]
fn wrong_type_names_the_field() {
    let err = parse_config("[cohort]\ncontrols_per_case = \"six\"\n").unwrap_err();
    assert!(matches!(err, CliError::Config(ref m) if m.starts_with("cohort.controls_per_case")), "{err}");
}

#[test]
fn thread_count_must_be_positive() {
    assert_eq!(parse_threads(None).unwrap(), 1);
    assert_eq!(parse_threads(Some("4")).unwrap(), 4);
    assert_eq!(parse_threads(Some("0")).unwrap_err().exit_code(), 3);
    assert_eq!(parse_threads(Some("many")).unwrap_err().exit_code(), 3);

    let out = Command::new(env!("CARGO_BIN_EXE_trace-seq"))
        .args(["--quiet", "validate-config"])
        .env("TRACE_SEQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_before_train_exits_two_naming_train() {
    let dir = tempfile::tempdir().unwrap();
    let out = trace_seq(&["evaluate"], None, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`train`"), "{}", stderr(&out));
}

#[test]
fn stages_gate_on_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = trace_seq(&["train"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`gen-cohort`"));

    assert!(trace_seq(&["gen-cohort"], Some(&cfg), dir.path()).status.success());
    let out = trace_seq(&["--variant", "TRACE", "train"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`pretrain-codes`"), "{}", stderr(&out));

    assert!(trace_seq(&["pretrain-codes"], Some(&cfg), dir.path()).status.success());
    let out = trace_seq(&["--variant", "TRACE", "train"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`pretrain-autoencoder`"), "{}", stderr(&out));

    // no encoder to pre-train
    let out = trace_seq(&["--variant", "LR", "pretrain-autoencoder"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn identical_invocations_produce_identical_manifests() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut manifests = Vec::new();
    for dir in &dirs {
        let cfg = write_config(dir.path(), TINY);
        for stage in ["gen-cohort", "train", "evaluate"] {
            let out = trace_seq(&[stage], Some(&cfg), dir.path());
            assert!(out.status.success(), "{stage}: {}", stderr(&out));
        }
        let text = fs::read_to_string(dir.path().join("manifests/evaluate-LR.json")).unwrap();
        let m: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.run_sha256, m.compute_run_hash());
        assert!(m.parents.contains_key("train:LR") && m.parents.contains_key("gen-cohort"));
        manifests.push(m);
    }
    let (a, b) = (&manifests[0], &manifests[1]);
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.parents, b.parents);
    assert_eq!(a.run_sha256, b.run_sha256);
    let metrics = |d: &Path| fs::read(d.join("models/LR/metrics.json")).unwrap();
    assert_eq!(metrics(dirs[0].path()), metrics(dirs[1].path()));
}

#[test]
fn seed_flag_changes_the_model_but_not_the_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert!(trace_seq(&["gen-cohort"], Some(&cfg), dir.path()).status.success());
    let cohort = fs::read(dir.path().join("cohort.jsonl")).unwrap();
    let mut weights = Vec::new();
    for seed in ["1", "2"] {
        assert!(trace_seq(&["--seed", seed, "train"], Some(&cfg), dir.path()).status.success());
        weights.push(fs::read(dir.path().join("models/LR/best.bin")).unwrap());
    }
    assert_ne!(weights[0], weights[1]);
    assert!(trace_seq(&["--seed", "9", "gen-cohort"], Some(&cfg), dir.path()).status.success());
    assert_eq!(fs::read(dir.path().join("cohort.jsonl")).unwrap(), cohort);
}
