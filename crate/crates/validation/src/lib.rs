//! Desk-scale experiments on the synthetic confounder dataset.

use patchad::config::{PolicyName, RunConfig, Variant, SYNTHETIC};
use patchad::metrics::MetricsReport;
use patchad::pipeline::{self, RunInputs};
use patchad::Result;

/// Run configuration of the synthetic confounder experiment for one seed:
/// six features, 20 000 timestamps, 2% confounders, 1% anomalies, and the
/// best-F1 threshold taken on the validation split.
pub fn confounder_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        dataset: Some(SYNTHETIC.into()),
        seed,
        ..RunConfig::default()
    };
    cfg.synthetic.seed = seed;
    cfg.synthetic.features = 6;
    cfg.synthetic.length = 20_000;
    cfg.synthetic.confounder_rate = 0.02;
    cfg.synthetic.anomaly_rate = 0.01;
    cfg.threshold.policy = PolicyName::BestF1;
    cfg
}

/// Outcome of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub seed: u64,
    pub variant: Variant,
    pub train_fraction: f64,
    pub report: MetricsReport,
    pub test_scores: Vec<f64>,
    /// Mean within-feature and cross-feature cosine similarity of the
    /// trained encoder on the test windows.
    pub separation: Option<(f64, f64)>,
}

impl Trial {
    pub fn f1(&self) -> f64 {
        self.report.f1.unwrap_or(0.0)
    }

    pub fn auc(&self) -> f64 {
        self.report.auc.unwrap_or(0.0)
    }

    /// Within-feature minus cross-feature similarity.
    pub fn separation_margin(&self) -> Option<f64> {
        self.separation.map(|(w, c)| w - c)
    }
}

/// Trains and evaluates one variant on the synthetic dataset of `seed`.
pub fn run_trial(seed: u64, variant: Variant, train_fraction: f64) -> Result<Trial> {
    let cfg = RunConfig {
        train_fraction,
        variant,
        ..confounder_config(seed)
    };
    cfg.validate()?;
    let dataset = pipeline::load_source(&cfg)?;
    let eval = pipeline::evaluate(&cfg, &dataset, variant, &RunInputs::default())?;
    let run = &eval.subsets[0];
    let separation = match &run.encoder_params {
        Some(encoder) => {
            let prepared = pipeline::prepare_subset(&cfg, &dataset.subsets[0])?;
            let tokens = pipeline::tokenize(&prepared.test.windows, cfg.patch_len)?;
            Some(pipeline::feature_separation(&tokens, encoder, &cfg)?)
        }
        None => None,
    };
    Ok(Trial {
        seed,
        variant,
        train_fraction,
        report: eval.report,
        test_scores: run.test_scores.clone(),
        separation,
    })
}
