//! The five commands behind the CLI. Each one validates its configuration,
//! loads the data, and only then creates the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, MODEL_SECTION};
use crate::config::{RunConfig, Variant};
use crate::contrastive::{EncoderTraining, ENCODER_SECTION};
use crate::data::Dataset;
use crate::detector;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::numeric::checkpoint;
use crate::pipeline::{self, Evaluation, RunInputs, SubsetRun};

pub const CONFIG_ECHO: &str = "config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Creates `dir`, refusing to reuse a non-empty one unless `overwrite` is set.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --overwrite to replace its contents)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// `epoch,loss` lines without a header, one per epoch, epochs counted from 1.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::new();
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{l:?}", e + 1);
    }
    out
}

fn file_name(stem: &str, subset: &str, many: bool, ext: &str) -> String {
    if many {
        let safe: String = subset
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{stem}-{safe}.{ext}")
    } else {
        format!("{stem}.{ext}")
    }
}

struct Setup {
    dataset: Dataset,
    out: PathBuf,
    inputs: RunInputs,
}

/// Validation, data loading, checkpoint loading, then the output directory.
fn setup(cfg: &RunConfig, overwrite: bool) -> Result<Setup> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let dataset = pipeline::load_source(cfg)?;
    cfg.backbone.validate(cfg.patches_per_window * dataset.features)?;
    let inputs = RunInputs {
        encoder: cfg
            .encoder_checkpoint
            .as_deref()
            .map(|p| checkpoint::load(p, ENCODER_SECTION))
            .transpose()?,
        backbone: cfg
            .backbone_checkpoint
            .as_deref()
            .map(|p| checkpoint::load(p, MODEL_SECTION))
            .transpose()?,
    };
    if dataset.subsets.len() > 1 && (inputs.encoder.is_some() || inputs.backbone.is_some()) {
        return Err(Error::Config(
            "checkpoints can only be reused on single-subset datasets".into(),
        ));
    }
    prepare_out_dir(&out, overwrite)?;
    write(out.join(CONFIG_ECHO), &cfg.to_toml())?;
    Ok(Setup { dataset, out, inputs })
}

/// Trains one encoder per subset; writes `encoder.ckpt` and `encoder_loss.csv`.
pub fn cmd_train_encoder(cfg: &RunConfig, overwrite: bool) -> Result<Vec<EncoderTraining>> {
    let Setup { dataset, out, .. } = setup(cfg, overwrite)?;
    let many = dataset.subsets.len() > 1;
    let mut results = Vec::new();
    for subset in &dataset.subsets {
        let prepared = pipeline::prepare_subset(cfg, subset)?;
        let trained = pipeline::train_subset_encoder(cfg, &prepared, cfg.n_negatives)?;
        checkpoint::save(&trained.params, ENCODER_SECTION, &out.join(file_name("encoder", &subset.name, many, "ckpt")))?;
        write(
            out.join(file_name("encoder_loss", &subset.name, many, "csv")),
            &loss_curve_csv(&trained.epoch_losses),
        )?;
        info!(
            "subset {}: encoder trained for {} epochs ({} steps)",
            subset.name,
            trained.epoch_losses.len(),
            trained.steps
        );
        results.push(trained);
    }
    Ok(results)
}

/// Summary written by [`cmd_finetune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub subset: String,
    pub epochs: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub stub_initial_loss: Option<f64>,
    pub stub_final_loss: Option<f64>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub trainable_tensors: usize,
    pub frozen_tensors: usize,
    pub runtime_seconds: f64,
}

/// Fine-tunes the backbone of every subset, checkpointing after each epoch.
///
/// Starts from the backbone checkpoint when one is configured, otherwise from
/// the stub. Uses the encoder checkpoint when configured, otherwise trains
/// (and saves) a fresh encoder.
pub fn cmd_finetune(cfg: &RunConfig, overwrite: bool) -> Result<Vec<FinetuneSummary>> {
    let Setup { dataset, out, inputs } = setup(cfg, overwrite)?;
    let many = dataset.subsets.len() > 1;
    let terms = cfg.variant.terms();
    let mut summaries = Vec::new();
    for subset in &dataset.subsets {
        let clock = Instant::now();
        let prepared = pipeline::prepare_subset(cfg, subset)?;
        let encoder = match (&inputs.encoder, terms.feature) {
            (_, false) => None,
            (Some(p), true) => Some(p.clone()),
            (None, true) => {
                let trained = pipeline::train_subset_encoder(cfg, &prepared, cfg.n_negatives)?;
                checkpoint::save(&trained.params, ENCODER_SECTION, &out.join(file_name("encoder", &subset.name, many, "ckpt")))?;
                Some(trained.params)
            }
        };
        let (start, stub_losses) = match &inputs.backbone {
            Some(p) => (p.clone(), None),
            None => {
                let stub = pipeline::pretrain(cfg)?;
                (stub.params, Some((stub.initial_loss, stub.final_loss)))
            }
        };
        let before = start.frozen_digest();
        let ckpt = out.join(file_name("backbone", &subset.name, many, "ckpt"));
        checkpoint::save(&start, MODEL_SECTION, &ckpt)?;
        let windows = pipeline::prepare_windows(&prepared.train, cfg, encoder.as_ref())?;
        let report = backbone::finetune(
            start,
            &windows,
            &cfg.backbone,
            terms,
            &pipeline::finetune_options(cfg),
            |_, params| checkpoint::save(params, MODEL_SECTION, &ckpt),
        )?;
        let after = report.params.frozen_digest();
        if after != before {
            return Err(Error::FrozenUpdate(format!("subset {}: frozen digest changed", subset.name)));
        }
        write(
            out.join(file_name("finetune_loss", &subset.name, many, "csv")),
            &loss_curve_csv(&report.epoch_losses),
        )?;
        let summary = FinetuneSummary {
            subset: subset.name.clone(),
            epochs: report.epoch_losses.len(),
            steps: report.steps,
            epoch_losses: report.epoch_losses.clone(),
            stub_initial_loss: stub_losses.map(|s| s.0),
            stub_final_loss: stub_losses.map(|s| s.1),
            frozen_digest_before: before,
            frozen_digest_after: after,
            trainable_tensors: report.params.trainable_count(),
            frozen_tensors: report.params.frozen_count(),
            runtime_seconds: clock.elapsed().as_secs_f64(),
        };
        write(
            out.join(file_name("finetune", &subset.name, many, "json")),
            &serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
        summaries.push(summary);
    }
    Ok(summaries)
}

fn write_scores(out: &Path, stem: &str, runs: &[SubsetRun], point_adjust: bool) -> Result<()> {
    let many = runs.len() > 1;
    for r in runs {
        let preds = pipeline::predictions(r, point_adjust)?;
        detector::write_score_dump(
            &out.join(file_name(stem, &r.name, many, "csv")),
            &r.test_timestamps,
            &r.test_scores,
            &preds,
            r.test_labels.as_deref(),
        )?;
    }
    Ok(())
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write(out.join(format!("{stem}.json")), &report.to_json())?;
    write(out.join(format!("{stem}.txt")), &report.to_key_value())
}

/// Full pipeline with the configured variant; writes the report pair and score dump.
pub fn cmd_eval(cfg: &RunConfig, overwrite: bool) -> Result<Evaluation> {
    let Setup { dataset, out, inputs } = setup(cfg, overwrite)?;
    let eval = pipeline::evaluate(cfg, &dataset, cfg.variant, &inputs)?;
    write_report(&out, "report", &eval.report)?;
    write_scores(&out, "scores", &eval.subsets, cfg.point_adjust)?;
    Ok(eval)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| format!("{x:?}"))
}

/// Runs the full, no-skip and no-feature variants with shared seeds and
/// writes `ablation.csv` plus one report per variant.
pub fn cmd_ablate(cfg: &RunConfig, overwrite: bool) -> Result<Vec<MetricsReport>> {
    let Setup { dataset, out, inputs } = setup(cfg, overwrite)?;
    let mut reports = Vec::new();
    let mut table = String::from("variant,f1,auc,precision,recall,threshold\n");
    for variant in Variant::ALL {
        let eval = pipeline::evaluate(cfg, &dataset, variant, &inputs)?;
        let r = eval.report;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{:?}",
            variant.name(),
            fmt_opt(r.f1),
            fmt_opt(r.auc),
            fmt_opt(r.precision),
            fmt_opt(r.recall),
            r.threshold
        );
        write_report(&out, &format!("report-{}", variant.name()), &r)?;
        reports.push(r);
    }
    write(out.join("ablation.csv"), &table)?;
    Ok(reports)
}

/// One row of the N sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub with_replacement: bool,
}

/// Retrains the encoder and reruns the evaluation for every N of the sweep
/// list; writes `sweep_n.csv`.
pub fn cmd_sweep_n(cfg: &RunConfig, overwrite: bool) -> Result<Vec<SweepRow>> {
    if cfg.n_list.is_empty() {
        return Err(Error::Config("the N sweep list is empty".into()));
    }
    if cfg.encoder_checkpoint.is_some() {
        return Err(Error::Config("the N sweep trains its own encoders; drop the encoder checkpoint".into()));
    }
    let Setup { dataset, out, inputs } = setup(cfg, overwrite)?;
    let mut rows = Vec::new();
    let mut table = String::from("n,f1,auc,with_replacement\n");
    for &n in &cfg.n_list {
        let run_cfg = RunConfig {
            n_negatives: n,
            ..cfg.clone()
        };
        let eval = pipeline::evaluate(&run_cfg, &dataset, Variant::Full, &inputs)?;
        let r = &eval.report;
        let _ = writeln!(
            table,
            "{n},{},{},{}",
            fmt_opt(r.f1),
            fmt_opt(r.auc),
            r.negatives_with_replacement
        );
        write_report(&out, &format!("report-n{n}"), r)?;
        rows.push(SweepRow {
            n,
            f1: r.f1,
            auc: r.auc,
            with_replacement: r.negatives_with_replacement,
        });
    }
    write(out.join("sweep_n.csv"), &table)?;
    Ok(rows)
}
