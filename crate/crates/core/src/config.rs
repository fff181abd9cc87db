//! Run configuration: every tunable of a pipeline run, loaded from TOML with
//! defaults for anything left out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, StubCorpus};
use crate::contrastive::EncoderConfig;
use crate::data::SyntheticSpec;
use crate::detector::ThresholdPolicy;
use crate::embedding::EmbeddingTerms;
use crate::error::{Error, Result};

/// Dataset name that selects the built-in synthetic generator.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Quantile,
    BestF1,
}

impl std::str::FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(PolicyName::Quantile),
            "best-f1" => Ok(PolicyName::BestF1),
            other => Err(Error::Config(format!(
                "unknown threshold policy {other:?} (expected quantile or best-f1)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub policy: PolicyName,
    /// Quantile level; derived from the declared anomaly ratio when absent.
    pub q: Option<f64>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            policy: PolicyName::Quantile,
            q: None,
        }
    }
}

/// How per-subset results combine into one report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Metrics over the concatenated scores and predictions of all subsets.
    Concat,
    /// Unweighted mean of per-subset metrics.
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Aggregation::Concat),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?} (expected concat or mean)"
            ))),
        }
    }
}

/// Which embedding terms a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSkip,
    NoFeature,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoSkip, Variant::NoFeature];

    pub fn terms(self) -> EmbeddingTerms {
        match self {
            Variant::Full => EmbeddingTerms::default(),
            Variant::NoSkip => EmbeddingTerms {
                skip: false,
                feature: true,
            },
            Variant::NoFeature => EmbeddingTerms {
                skip: true,
                feature: false,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSkip => "no-skip",
            Variant::NoFeature => "no-feature",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub windows_per_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Leading share of a synthetic series used for training.
    pub train: f64,
    /// Following share kept as a labeled validation split.
    pub validation: f64,
    /// Keep planted events out of the training share.
    pub clean_train: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.5,
            validation: 0.2,
            clean_train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest path, or `synthetic`.
    pub dataset: Option<String>,
    /// Directory holding the files a manifest names; defaults to the manifest's directory.
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub train_fraction: f64,
    pub patch_len: usize,
    pub patches_per_window: usize,
    /// Offset between consecutive training windows; 0 means one window length.
    pub train_stride: usize,
    pub n_negatives: usize,
    pub variant: Variant,
    pub point_adjust: bool,
    pub aggregation: Aggregation,
    pub encoder_checkpoint: Option<PathBuf>,
    pub backbone_checkpoint: Option<PathBuf>,
    /// Negative counts visited by the N sweep.
    pub n_list: Vec<usize>,
    pub threshold: ThresholdConfig,
    pub encoder: EncoderConfig,
    pub encoder_training: TrainingConfig,
    pub backbone: BackboneConfig,
    pub stub: StubCorpus,
    pub finetune: TrainingConfig,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            data_dir: None,
            out: None,
            seed: 0,
            train_fraction: 1.0,
            patch_len: 16,
            patches_per_window: 8,
            train_stride: 0,
            n_negatives: 3,
            variant: Variant::Full,
            point_adjust: false,
            aggregation: Aggregation::Concat,
            encoder_checkpoint: None,
            backbone_checkpoint: None,
            n_list: vec![1, 2, 3, 4, 5],
            threshold: ThresholdConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_training: TrainingConfig::default(),
            backbone: BackboneConfig::default(),
            stub: StubCorpus::default(),
            finetune: TrainingConfig::default(),
            synthetic: SyntheticSpec::default(),
            split: SplitConfig::default(),
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            windows_per_step: 4,
        }
    }
}

/// Where the data of a run comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic,
    Manifest(PathBuf),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn window_len(&self) -> usize {
        self.patch_len * self.patches_per_window
    }

    pub fn stride(&self) -> usize {
        if self.train_stride == 0 {
            self.window_len()
        } else {
            self.train_stride
        }
    }

    pub fn source(&self) -> Result<DatasetSource> {
        match self.dataset.as_deref() {
            None | Some("") => Err(Error::Config("no dataset given".into())),
            Some(SYNTHETIC) => Ok(DatasetSource::Synthetic),
            Some(path) => Ok(DatasetSource::Manifest(PathBuf::from(path))),
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given".into()))
    }

    /// Threshold policy, with `q = 1 − ratio/100` filled in when not set.
    pub fn threshold_policy(&self, anomaly_ratio_pct: Option<f64>) -> Result<ThresholdPolicy> {
        let policy = match self.threshold.policy {
            PolicyName::BestF1 => ThresholdPolicy::BestF1,
            PolicyName::Quantile => {
                let q = match (self.threshold.q, anomaly_ratio_pct) {
                    (Some(q), _) => q,
                    (None, Some(r)) => 1.0 - r / 100.0,
                    (None, None) => {
                        return Err(Error::Config(
                            "quantile policy needs q or a declared anomaly ratio".into(),
                        ))
                    }
                };
                ThresholdPolicy::Quantile { q }
            }
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        self.source()?;
        if let DatasetSource::Manifest(p) = self.source()? {
            if !p.is_file() {
                return cfg(format!("dataset manifest {} does not exist", p.display()));
            }
            if let Some(d) = &self.data_dir {
                if !d.is_dir() {
                    return cfg(format!("data directory {} does not exist", d.display()));
                }
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return cfg(format!("training fraction {} is outside (0, 1]", self.train_fraction));
        }
        if self.patch_len == 0 || self.patches_per_window == 0 {
            return cfg("patch length and patches per window must be positive".into());
        }
        if self.n_negatives == 0 {
            return cfg("at least one negative is required".into());
        }
        if self.n_list.iter().any(|&n| n == 0) {
            return cfg("the N sweep list must hold positive counts".into());
        }
        if let Some(q) = self.threshold.q {
            ThresholdPolicy::Quantile { q }.validate()?;
        }
        for (name, t) in [("encoder_training", &self.encoder_training), ("finetune", &self.finetune)] {
            if !(t.lr > 0.0 && t.lr.is_finite()) {
                return cfg(format!("{name}.lr must be positive"));
            }
            if t.windows_per_step == 0 {
                return cfg(format!("{name}.windows_per_step must be positive"));
            }
        }
        if !(self.stub.lr > 0.0) || self.stub.seq_len == 0 || self.stub.sequences == 0 {
            return cfg("stub corpus needs positive lr, sequences and length".into());
        }
        self.encoder.validate(self.patch_len)?;
        self.backbone.validate(self.stub.seq_len)?;
        if self.source()? == DatasetSource::Synthetic {
            self.synthetic.validate()?;
            self.backbone.validate(self.patches_per_window * self.synthetic.features)?;
            let s = &self.split;
            if !(s.train > 0.0 && s.validation >= 0.0 && s.train + s.validation < 1.0) {
                return cfg("split shares must leave a non-empty test part".into());
            }
        }
        Ok(())
    }
}
