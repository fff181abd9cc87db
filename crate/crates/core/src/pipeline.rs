//! End-to-end runs over one dataset: windowing, encoder training, backbone
//! fine-tuning, scoring, thresholding and evaluation.
//!
//! Every subset of a dataset gets its own normalization statistics, encoder
//! and model. Per-subset results are combined according to
//! [`Aggregation`].

use std::time::Instant;

use log::info;

use crate::backbone::{self, FinetuneOptions, FinetuneReport, PreparedWindow, PretrainReport};
use crate::config::{Aggregation, DatasetSource, RunConfig, Variant};
use crate::contrastive::{self, EncoderTrainOptions, EncoderTraining};
use crate::data::{self, Dataset, DatasetManifest, Series, Subset};
use crate::detector::{self, ThresholdPolicy};
use crate::embedding::{self, EmbeddingTerms};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::numeric::{ParameterStore, Tape, Tensor};
use crate::tokenizer::{self, NormStats, SeriesWindow, TokenSeries};

const ENCODER_STREAM: u64 = 1;
const STUB_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;

/// Independent seed for one stage of a run (SplitMix64 finalizer).
pub fn stage_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads the configured dataset, generating it when synthetic.
pub fn load_source(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.source()? {
        DatasetSource::Synthetic => data::synthetic_dataset(
            &cfg.synthetic,
            cfg.split.train,
            cfg.split.validation,
            cfg.split.clean_train,
        ),
        DatasetSource::Manifest(path) => {
            let mut manifest = DatasetManifest::read(&path)?;
            if let Some(dir) = &cfg.data_dir {
                manifest.base_dir = dir.clone();
            }
            data::load_dataset(&manifest)
        }
    }
}

/// Normalized windows covering an evaluation split.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub windows: Vec<SeriesWindow>,
    /// Labels of the covered rows, when the split is labeled.
    pub labels: Option<Vec<bool>>,
    pub rows: usize,
    /// Trailing rows that do not fill a window.
    pub dropped: usize,
}

impl EvalSplit {
    pub fn covered(&self) -> usize {
        self.rows - self.dropped
    }
}

#[derive(Debug, Clone)]
pub struct PreparedSubset {
    pub name: String,
    pub stats: NormStats,
    pub train_rows: usize,
    /// Training windows at the configured stride.
    pub train: Vec<SeriesWindow>,
    /// Non-overlapping tiling of the training rows, for quantile thresholds.
    pub train_tiling: Vec<SeriesWindow>,
    pub validation: Option<EvalSplit>,
    pub test: EvalSplit,
}

fn windows_at(series: &Series, stats: &NormStats, cfg: &RunConfig, stride: usize) -> Result<(Vec<SeriesWindow>, usize)> {
    let (starts, dropped) = tokenizer::tile_windows(series.len(), cfg.window_len(), stride);
    let windows = starts
        .into_iter()
        .map(|s| tokenizer::normalize_window(series, stats, s, cfg.window_len(), cfg.patch_len))
        .collect::<Result<Vec<_>>>()?;
    Ok((windows, dropped))
}

fn eval_split(series: &Series, labels: Option<&Vec<bool>>, stats: &NormStats, cfg: &RunConfig) -> Result<EvalSplit> {
    let (windows, dropped) = windows_at(series, stats, cfg, cfg.window_len())?;
    let covered = series.len() - dropped;
    Ok(EvalSplit {
        windows,
        labels: labels.map(|l| l[..covered].to_vec()),
        rows: series.len(),
        dropped,
    })
}

/// Applies the training fraction, fits statistics and cuts all windows.
pub fn prepare_subset(cfg: &RunConfig, subset: &Subset) -> Result<PreparedSubset> {
    let train = data::subsample_training(&subset.train, cfg.train_fraction)?;
    let stats = NormStats::fit(&train)?;
    let (train_windows, _) = windows_at(&train, &stats, cfg, cfg.stride())?;
    if train_windows.is_empty() {
        return Err(Error::InsufficientData(format!(
            "subset {}: {} training rows do not fill one {}-row window",
            subset.name,
            train.len(),
            cfg.window_len()
        )));
    }
    let (train_tiling, _) = windows_at(&train, &stats, cfg, cfg.window_len())?;
    let validation = subset
        .validation
        .as_ref()
        .map(|v| eval_split(&v.series, v.labels.as_ref(), &stats, cfg))
        .transpose()?;
    let test = eval_split(&subset.test.series, subset.test.labels.as_ref(), &stats, cfg)?;
    if test.windows.is_empty() {
        return Err(Error::InsufficientData(format!(
            "subset {}: {} test rows do not fill one window",
            subset.name, test.rows
        )));
    }
    Ok(PreparedSubset {
        name: subset.name.clone(),
        stats,
        train_rows: train.len(),
        train: train_windows,
        train_tiling,
        validation,
        test,
    })
}

/// Feature-major token series of every window.
pub fn tokenize(windows: &[SeriesWindow], patch_len: usize) -> Result<Vec<TokenSeries>> {
    windows.iter().map(|w| tokenizer::patchify(w, patch_len)).collect()
}

/// Trains the contrastive encoder on the training windows of one subset.
pub fn train_subset_encoder(cfg: &RunConfig, prepared: &PreparedSubset, n_negatives: usize) -> Result<EncoderTraining> {
    let tokens = tokenize(&prepared.train, cfg.patch_len)?;
    contrastive::train_encoder(
        &tokens,
        &cfg.encoder,
        &EncoderTrainOptions {
            n_negatives,
            epochs: cfg.encoder_training.epochs,
            lr: cfg.encoder_training.lr,
            seed: stage_seed(cfg.seed, ENCODER_STREAM),
            windows_per_step: cfg.encoder_training.windows_per_step,
        },
    )
}

/// Stand-in pre-trained backbone for this configuration.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    backbone::pretrain_stub(
        &cfg.backbone,
        cfg.patch_len,
        cfg.encoder.repr_dim,
        stage_seed(cfg.seed, STUB_STREAM),
        &cfg.stub,
    )
}

/// Time-major tokens and, when `encoder` is given, per-token representations.
pub fn prepare_windows(
    windows: &[SeriesWindow],
    cfg: &RunConfig,
    encoder: Option<&ParameterStore>,
) -> Result<Vec<PreparedWindow>> {
    windows
        .iter()
        .map(|w| {
            let s = tokenizer::patchify(w, cfg.patch_len)?;
            let reprs = match encoder {
                Some(params) => {
                    let rows: Vec<&[f64]> = s.patches().iter().map(|p| p.values.as_slice()).collect();
                    let r = contrastive::encode_rows(&rows, params, &cfg.encoder)?;
                    Some(embedding::reorder_rows(&s, &r)?)
                }
                None => None,
            };
            Ok(PreparedWindow {
                tokens: tokenizer::skip_reorder(s)?,
                reprs,
                start: w.start,
            })
        })
        .collect()
}

pub fn finetune_options(cfg: &RunConfig) -> FinetuneOptions {
    FinetuneOptions {
        epochs: cfg.finetune.epochs,
        lr: cfg.finetune.lr,
        seed: stage_seed(cfg.seed, FINETUNE_STREAM),
        windows_per_step: cfg.finetune.windows_per_step,
    }
}

/// Reconstruction of one prepared window, `[P·M × patch_len]`.
pub fn reconstruct(
    params: &ParameterStore,
    cfg: &RunConfig,
    terms: EmbeddingTerms,
    w: &PreparedWindow,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let recon = backbone::reconstruct_window(&mut tape, &bound, &cfg.backbone, w, terms)?;
    Ok(tape.value(recon).clone())
}

/// Concatenated per-timestamp scores of consecutive windows.
pub fn score_windows(
    params: &ParameterStore,
    cfg: &RunConfig,
    terms: EmbeddingTerms,
    windows: &[SeriesWindow],
    encoder: Option<&ParameterStore>,
) -> Result<Vec<f64>> {
    let prepared = prepare_windows(windows, cfg, encoder)?;
    let mut scores = Vec::with_capacity(windows.len() * cfg.window_len());
    for (w, p) in windows.iter().zip(&prepared) {
        let recon = reconstruct(params, cfg, terms, p)?;
        scores.extend(detector::scores_from_reconstruction(w, &p.tokens, &recon)?.scores);
    }
    Ok(scores)
}

/// Pre-trained parameters supplied instead of training.
#[derive(Debug, Clone, Default)]
pub struct RunInputs {
    pub encoder: Option<ParameterStore>,
    /// Used as the final model; fine-tuning is skipped.
    pub backbone: Option<ParameterStore>,
}

/// Result of one subset.
#[derive(Debug, Clone)]
pub struct SubsetRun {
    pub name: String,
    pub encoder: Option<EncoderTraining>,
    pub encoder_params: Option<ParameterStore>,
    pub stub: Option<PretrainReport>,
    pub finetune: Option<FinetuneReport>,
    pub params: ParameterStore,
    pub test_timestamps: Vec<usize>,
    pub test_scores: Vec<f64>,
    pub test_labels: Option<Vec<bool>>,
    pub validation_scores: Option<Vec<f64>>,
    pub threshold: f64,
    pub threshold_source: &'static str,
    pub train_rows: usize,
    pub test_rows: usize,
    pub dropped_rows: usize,
    pub with_replacement: bool,
    pub training_seconds: f64,
}

/// Trains (or takes) the models of one subset and scores its test split.
pub fn run_subset(
    cfg: &RunConfig,
    prepared: &PreparedSubset,
    policy: ThresholdPolicy,
    variant: Variant,
    inputs: &RunInputs,
) -> Result<SubsetRun> {
    let terms = variant.terms();
    let clock = Instant::now();
    let mut encoder = None;
    let encoder_params = if !terms.feature {
        None
    } else if let Some(p) = &inputs.encoder {
        Some(p.clone())
    } else {
        let trained = train_subset_encoder(cfg, prepared, cfg.n_negatives)?;
        let params = trained.params.clone();
        encoder = Some(trained);
        Some(params)
    };
    let (stub, finetune, params) = match &inputs.backbone {
        Some(p) => (None, None, p.clone()),
        None => {
            let stub = pretrain(cfg)?;
            let windows = prepare_windows(&prepared.train, cfg, encoder_params.as_ref())?;
            let report = backbone::finetune(
                stub.params.clone(),
                &windows,
                &cfg.backbone,
                terms,
                &finetune_options(cfg),
                |_, _| Ok(()),
            )?;
            let params = report.params.clone();
            (Some(stub), Some(report), params)
        }
    };
    let training_seconds = clock.elapsed().as_secs_f64();
    let enc = encoder_params.as_ref();
    let test_scores = score_windows(&params, cfg, terms, &prepared.test.windows, enc)?;
    let validation_scores = prepared
        .validation
        .as_ref()
        .map(|v| score_windows(&params, cfg, terms, &v.windows, enc))
        .transpose()?;
    let (threshold, threshold_source) = match policy {
        ThresholdPolicy::Quantile { .. } => {
            let train_scores = score_windows(&params, cfg, terms, &prepared.train_tiling, enc)?;
            (detector::resolve_threshold(&train_scores, policy, None)?, "train")
        }
        ThresholdPolicy::BestF1 => {
            let labeled_val = prepared
                .validation
                .as_ref()
                .zip(validation_scores.as_ref())
                .and_then(|(v, s)| v.labels.as_ref().filter(|_| !s.is_empty()).map(|l| (s, l)));
            match (labeled_val, prepared.test.labels.as_ref()) {
                (Some((s, l)), _) => (detector::resolve_threshold(s, policy, Some(l))?, "validation"),
                (None, Some(l)) => (detector::resolve_threshold(&test_scores, policy, Some(l))?, "test"),
                (None, None) => {
                    return Err(Error::Config(format!(
                        "subset {}: best-f1 thresholding needs labeled validation or test data",
                        prepared.name
                    )))
                }
            }
        }
    };
    let start = prepared.test.windows[0].start;
    info!(
        "subset {}: threshold {threshold:.6} from {threshold_source}, {} test rows scored",
        prepared.name,
        test_scores.len()
    );
    Ok(SubsetRun {
        name: prepared.name.clone(),
        with_replacement: encoder.as_ref().is_some_and(|e| e.with_replacement),
        encoder,
        encoder_params,
        stub,
        finetune,
        params,
        test_timestamps: (start..start + test_scores.len()).collect(),
        test_scores,
        test_labels: prepared.test.labels.clone(),
        validation_scores,
        threshold,
        threshold_source,
        train_rows: prepared.train_rows,
        test_rows: prepared.test.rows,
        dropped_rows: prepared.test.dropped,
        training_seconds,
    })
}

/// Binary predictions of a subset, point-adjusted when configured and labeled.
pub fn predictions(run: &SubsetRun, point_adjust: bool) -> Result<Vec<bool>> {
    let raw = detector::detect(&run.test_scores, run.threshold);
    match (&run.test_labels, point_adjust) {
        (Some(l), true) => metrics::point_adjust(&raw, l),
        _ => Ok(raw),
    }
}

struct Labeled {
    precision: f64,
    recall: f64,
    f1: f64,
    auc: std::result::Result<f64, String>,
    confusion: metrics::Confusion,
    degenerate: bool,
}

fn labeled_metrics(scores: &[f64], preds: &[bool], labels: &[bool]) -> Result<Labeled> {
    let f = metrics::f1_score(preds, labels)?;
    let auc = match metrics::roc_auc(scores, labels) {
        Ok(a) => Ok(a),
        Err(e @ Error::UndefinedMetric(_)) => Err(e.to_string()),
        Err(e) => return Err(e),
    };
    Ok(Labeled {
        precision: f.precision,
        recall: f.recall,
        f1: f.f1,
        auc,
        confusion: f.confusion,
        degenerate: f.degenerate,
    })
}

fn policy_name(policy: ThresholdPolicy) -> String {
    match policy {
        ThresholdPolicy::Quantile { q } => format!("quantile(q={q})"),
        ThresholdPolicy::BestF1 => "best-f1".into(),
    }
}

/// Combines subset results into one report. Timing fields are left at zero.
pub fn summarize(
    cfg: &RunConfig,
    dataset: &str,
    variant: Variant,
    policy: ThresholdPolicy,
    runs: &[SubsetRun],
) -> Result<MetricsReport> {
    let preds = runs
        .iter()
        .map(|r| predictions(r, cfg.point_adjust))
        .collect::<Result<Vec<_>>>()?;
    let labeled = runs.iter().all(|r| r.test_labels.is_some());
    let mut report = MetricsReport {
        dataset: dataset.to_string(),
        variant: variant.name().to_string(),
        seed: cfg.seed,
        precision: None,
        recall: None,
        f1: None,
        auc: None,
        f1_omitted: None,
        auc_omitted: None,
        threshold: runs.iter().map(|r| r.threshold).sum::<f64>() / runs.len() as f64,
        threshold_policy: policy_name(policy),
        threshold_source: runs.first().map_or("none", |r| r.threshold_source).to_string(),
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        f1_degenerate: false,
        point_adjusted: cfg.point_adjust && labeled,
        aggregation: match cfg.aggregation {
            Aggregation::Concat => "concat".into(),
            Aggregation::Mean => "mean".into(),
        },
        subsets: runs.len(),
        n_negatives: cfg.n_negatives,
        negatives_with_replacement: runs.iter().any(|r| r.with_replacement),
        train_fraction: cfg.train_fraction,
        train_rows: runs.iter().map(|r| r.train_rows).sum(),
        test_rows: runs.iter().map(|r| r.test_rows).sum(),
        scored_rows: runs.iter().map(|r| r.test_scores.len()).sum(),
        dropped_rows: runs.iter().map(|r| r.dropped_rows).sum(),
        runtime_seconds: 0.0,
        training_seconds: 0.0,
    };
    if !labeled {
        let reason = "test labels unavailable".to_string();
        report.f1_omitted = Some(reason.clone());
        report.auc_omitted = Some(reason);
        return Ok(report);
    }
    let per_subset: Vec<Labeled> = match cfg.aggregation {
        Aggregation::Concat => {
            let scores: Vec<f64> = runs.iter().flat_map(|r| r.test_scores.iter().copied()).collect();
            let labels: Vec<bool> = runs
                .iter()
                .flat_map(|r| r.test_labels.as_ref().expect("labeled").iter().copied())
                .collect();
            let p: Vec<bool> = preds.concat();
            vec![labeled_metrics(&scores, &p, &labels)?]
        }
        Aggregation::Mean => runs
            .iter()
            .zip(&preds)
            .map(|(r, p)| labeled_metrics(&r.test_scores, p, r.test_labels.as_ref().expect("labeled")))
            .collect::<Result<_>>()?,
    };
    let k = per_subset.len() as f64;
    report.precision = Some(per_subset.iter().map(|m| m.precision).sum::<f64>() / k);
    report.recall = Some(per_subset.iter().map(|m| m.recall).sum::<f64>() / k);
    report.f1 = Some(per_subset.iter().map(|m| m.f1).sum::<f64>() / k);
    report.f1_degenerate = per_subset.iter().any(|m| m.degenerate);
    for m in &per_subset {
        report.tp += m.confusion.tp;
        report.fp += m.confusion.fp;
        report.tn += m.confusion.tn;
        report.fn_ += m.confusion.fn_;
    }
    let aucs: Vec<f64> = per_subset.iter().filter_map(|m| m.auc.as_ref().ok().copied()).collect();
    if aucs.is_empty() {
        report.auc_omitted = per_subset.iter().find_map(|m| m.auc.as_ref().err().cloned());
    } else {
        report.auc = Some(aucs.iter().sum::<f64>() / aucs.len() as f64);
        if aucs.len() < per_subset.len() {
            report.auc_omitted = Some(format!(
                "AUC undefined on {} of {} subsets and averaged over the rest",
                per_subset.len() - aucs.len(),
                per_subset.len()
            ));
        }
    }
    Ok(report)
}

/// Everything one evaluation produced.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub subsets: Vec<SubsetRun>,
}

/// Runs the whole pipeline on a loaded dataset.
pub fn evaluate(cfg: &RunConfig, dataset: &Dataset, variant: Variant, inputs: &RunInputs) -> Result<Evaluation> {
    let clock = Instant::now();
    let policy = cfg.threshold_policy(dataset.anomaly_ratio_pct)?;
    if dataset.subsets.len() > 1 && (inputs.encoder.is_some() || inputs.backbone.is_some()) {
        return Err(Error::Config(
            "checkpoints can only be reused on single-subset datasets".into(),
        ));
    }
    cfg.backbone.validate(cfg.patches_per_window * dataset.features)?;
    let mut runs = Vec::with_capacity(dataset.subsets.len());
    for subset in &dataset.subsets {
        let prepared = prepare_subset(cfg, subset)?;
        runs.push(run_subset(cfg, &prepared, policy, variant, inputs)?);
    }
    let mut report = summarize(cfg, &dataset.name, variant, policy, &runs)?;
    report.training_seconds = runs.iter().map(|r| r.training_seconds).sum();
    report.runtime_seconds = clock.elapsed().as_secs_f64();
    Ok(Evaluation { report, subsets: runs })
}

/// Mean within-feature and mean cross-feature cosine similarity over all
/// pairs of distinct patches of the given token series.
pub fn feature_separation(tokens: &[TokenSeries], encoder: &ParameterStore, cfg: &RunConfig) -> Result<(f64, f64)> {
    let mut reprs: Vec<(usize, Vec<f64>)> = Vec::new();
    for s in tokens {
        let rows: Vec<&[f64]> = s.patches().iter().map(|p| p.values.as_slice()).collect();
        let r = contrastive::encode_rows(&rows, encoder, &cfg.encoder)?;
        for (k, p) in s.patches().iter().enumerate() {
            reprs.push((p.feature, r.row(k).to_vec()));
        }
    }
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..reprs.len() {
        for b in a + 1..reprs.len() {
            let c = contrastive::cosine_similarity(&reprs[a].1, &reprs[b].1)?;
            if reprs[a].0 == reprs[b].0 {
                within += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    if nw == 0 || nc == 0 {
        return Err(Error::InsufficientData("separation needs two patches per feature and two features".into()));
    }
    Ok((within / nw as f64, cross / nc as f64))
}
