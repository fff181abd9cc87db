use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchad::config::RunConfig;
use patchad::data::{self, SyntheticSpec};
use patchad::metrics::MetricsReport;
use patchad::numeric::checkpoint;
use patchad::backbone::MODEL_SECTION;
use patchad::pipeline;

const TINY: &str = r#"
dataset = "synthetic"
patch_len = 8
patches_per_window = 4

[synthetic]
length = 2000
features = 3

[encoder]
blocks = 2
channels = 8
repr_dim = 8

[backbone]
layers = 1
heads = 2
d_model = 16
d_ff = 32
max_seq = 32

[stub]
sequences = 4
steps = 5

[encoder_training]
epochs = 3

[finetune]
epochs = 2
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn patchad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchad"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = patchad(args);
    assert!(
        out.status.success(),
        "patchad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_report(path: &Path) -> MetricsReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_dataset_is_a_config_error_with_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = patchad(&["train-encoder", "--out", s(&out)]).status;
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.toml");
    let status = patchad(&["eval", "--dataset", s(&missing), "--out", s(&out)]).status;
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_flag_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    for extra in [["--fraction", "1.5"], ["--quantile", "1.0"], ["--n-negatives", "0"]] {
        let mut args = vec!["eval", "--config", s(&cfg), "--out", s(&out)];
        args.extend(extra);
        assert_eq!(patchad(&args).status.code(), Some(2), "{extra:?}");
        assert!(!out.exists());
    }
}

/// Writes a small benchmark-style dataset whose manifest overstates the test
/// rows by `test_row_error`.
fn write_dataset(dir: &Path, with_labels: bool, test_row_error: usize) -> PathBuf {
    let spec = SyntheticSpec {
        features: 3,
        length: 2000,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let d = data::synthetic_dataset(&spec, 0.5, 0.0, true).unwrap();
    let sub = &d.subsets[0];
    data::write_matrix_csv(&sub.train, &dir.join("train.csv")).unwrap();
    data::write_matrix_csv(&sub.test.series, &dir.join("test.csv")).unwrap();
    data::write_labels_csv(sub.test.labels.as_ref().unwrap(), &dir.join("labels.csv")).unwrap();
    let labels = if with_labels { "labels = \"labels.csv\"\n" } else { "" };
    let text = format!(
        "name = \"tiny\"\nfeatures = 3\ntrain_rows = {}\ntest_rows = {}\nanomaly_ratio_pct = 1.0\n\n[[subsets]]\ntrain = \"train.csv\"\ntest = \"test.csv\"\n{labels}",
        sub.train.len(),
        sub.test.series.len() + test_row_error
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn miscounted_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = write_dataset(dir.path(), true, 1);
    let out = dir.path().join("out");
    let status = patchad(&["eval", "--config", s(&cfg), "--dataset", s(&manifest), "--out", s(&out)]).status;
    assert_eq!(status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    run_ok(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    let before = fs::read(out.join("report.json")).unwrap();
    let status = patchad(&["eval", "--config", s(&cfg), "--out", s(&out), "--seed", "9"]).status;
    assert_eq!(status.code(), Some(2));
    assert_eq!(fs::read(out.join("report.json")).unwrap(), before);
    run_ok(&["eval", "--config", s(&cfg), "--out", s(&out), "--seed", "9", "--overwrite"]);
    assert_eq!(read_report(&out.join("report.json")).seed, 9);
}

#[test]
fn encoder_loss_curve_has_one_line_per_epoch_and_seed_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["train-encoder", "--config", s(&cfg), "--out", s(&a), "--encoder-epochs", "4"]);
    run_ok(&["train-encoder", "--config", s(&cfg), "--out", s(&b), "--encoder-epochs", "4"]);
    let curve = fs::read_to_string(a.join("encoder_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.lines().enumerate().all(|(k, l)| l.starts_with(&format!("{},", k + 1))));
    assert_eq!(fs::read(a.join("encoder.ckpt")).unwrap(), fs::read(b.join("encoder.ckpt")).unwrap());
    assert!(a.join("config.toml").is_file());
}

#[test]
fn zero_epoch_finetune_keeps_the_stub() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = dir.path().join("out");
    run_ok(&["finetune", "--config", s(&cfg_path), "--out", s(&out), "--finetune-epochs", "0"]);
    let cfg = RunConfig::read(&cfg_path).unwrap();
    let stub = pipeline::pretrain(&cfg).unwrap().params;
    let expected = checkpoint::encode(&stub, MODEL_SECTION);
    assert_eq!(fs::read(out.join("backbone.ckpt")).unwrap(), expected);
    assert_eq!(fs::read_to_string(out.join("finetune_loss.csv")).unwrap(), "");
}

#[test]
fn finetune_reports_runtime_and_intact_frozen_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    run_ok(&["finetune", "--config", s(&cfg), "--out", s(&out)]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("finetune.json")).unwrap()).unwrap();
    assert!(summary["runtime_seconds"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["frozen_digest_before"], summary["frozen_digest_after"]);
    assert_eq!(fs::read_to_string(out.join("finetune_loss.csv")).unwrap().lines().count(), 2);
    assert!(out.join("encoder.ckpt").is_file());
}

#[test]
fn eval_reports_bounded_metrics_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["eval", "--config", s(&cfg), "--out", s(&a), "--threshold-policy", "best-f1"]);
    run_ok(&["eval", "--config", s(&cfg), "--out", s(&b), "--threshold-policy", "best-f1"]);
    let (ra, rb) = (read_report(&a.join("report.json")), read_report(&b.join("report.json")));
    let (f1, auc) = (ra.f1.unwrap(), ra.auc.unwrap());
    assert!((0.0..=1.0).contains(&f1) && (0.0..=1.0).contains(&auc));
    assert!(ra.runtime_seconds > 0.0);
    assert_eq!(ra.without_timing(), rb.without_timing());
    assert_eq!(fs::read(a.join("scores.csv")).unwrap(), fs::read(b.join("scores.csv")).unwrap());
    let header = fs::read_to_string(a.join("scores.csv")).unwrap();
    assert_eq!(header.lines().next(), Some("timestamp,score,prediction,label"));
    assert!(fs::read_to_string(a.join("report.txt")).unwrap().contains("f1="));
}

#[test]
fn withheld_labels_omit_auc_with_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = write_dataset(dir.path(), false, 0);
    let out = dir.path().join("out");
    run_ok(&["eval", "--config", s(&cfg), "--dataset", s(&manifest), "--out", s(&out)]);
    let r = read_report(&out.join("report.json"));
    assert_eq!(r.auc, None);
    assert!(r.auc_omitted.is_some_and(|why| !why.is_empty()));
    assert_eq!(r.f1, None);
}

#[test]
fn ablation_emits_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    run_ok(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, name) in rows.iter().zip(["full", "no-skip", "no-feature"]) {
        assert!(row.starts_with(&format!("{name},")));
        assert!(out.join(format!("report-{name}.json")).is_file());
    }
}

#[test]
fn sweep_records_rows_and_replacement_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let single = dir.path().join("single");
    run_ok(&["sweep-n", "--config", s(&cfg), "--out", s(&single), "--n-list", "1"]);
    let table = fs::read_to_string(single.join("sweep_n.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().ends_with(",false"));

    // three features leave two negatives without replacement
    let over = dir.path().join("over");
    run_ok(&["sweep-n", "--config", s(&cfg), "--out", s(&over), "--n-list", "2,3"]);
    let table = fs::read_to_string(over.join("sweep_n.csv")).unwrap();
    let flags: Vec<&str> = table.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(flags, ["false", "true"]);
    assert!(read_report(&over.join("report-n3.json")).negatives_with_replacement);
}
