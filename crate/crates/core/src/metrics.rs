//! Detection metrics: confusion counts, F1, ROC-AUC and point adjustment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[bool], labels: &[bool]) -> Result<Self> {
        check_lengths("confusion", predictions.len(), labels.len())?;
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} predictions or scores, {b} labels")));
    }
    Ok(())
}

/// F1 from confusion counts; 0 when precision + recall is 0.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Set when there are no positive labels and no positive predictions.
    pub degenerate: bool,
}

pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<F1Score> {
    let c = Confusion::from_predictions(predictions, labels)?;
    Ok(F1Score {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        confusion: c,
        degenerate: c.tp + c.fp + c.fn_ == 0,
    })
}

/// ROC-AUC as the Mann-Whitney statistic: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths("roc_auc", scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positive, {neg} negative labels)"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "roc_auc" });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, with tied groups sharing their mean rank
    let mut rank_sum2: u128 = 0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && scores[idx[end + 1]] == scores[idx[k]] {
            end += 1;
        }
        let positives = idx[k..=end].iter().filter(|&&i| labels[i]).count() as u128;
        // ranks k+1..=end+1, mean rank (k + end + 2) / 2
        rank_sum2 += positives * (k + end + 2) as u128;
        k = end + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Marks every timestamp of a labeled anomaly segment as detected once any
/// timestamp inside it is.
pub fn point_adjust(predictions: &[bool], labels: &[bool]) -> Result<Vec<bool>> {
    check_lengths("point_adjust", predictions.len(), labels.len())?;
    let mut out = predictions.to_vec();
    let mut t = 0;
    while t < labels.len() {
        if !labels[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < labels.len() && labels[t] {
            t += 1;
        }
        if predictions[start..t].iter().any(|&p| p) {
            out[start..t].iter_mut().for_each(|p| *p = true);
        }
    }
    Ok(out)
}

/// Evaluation summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    /// Why the label-based metrics are absent.
    pub f1_omitted: Option<String>,
    /// Why `auc` is absent.
    pub auc_omitted: Option<String>,
    pub threshold: f64,
    pub threshold_policy: String,
    pub threshold_source: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub f1_degenerate: bool,
    pub point_adjusted: bool,
    pub aggregation: String,
    pub subsets: usize,
    pub n_negatives: usize,
    pub negatives_with_replacement: bool,
    pub train_fraction: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub scored_rows: usize,
    pub dropped_rows: usize,
    pub runtime_seconds: f64,
    pub training_seconds: f64,
}

impl MetricsReport {
    /// Flat `key=value` lines in field order.
    pub fn to_key_value(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let serde_json::Value::Object(map) = value else {
            unreachable!("report is a struct")
        };
        let mut out = String::new();
        for (k, v) in map {
            let text = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Null => "none".to_string(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k}={text}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            runtime_seconds: 0.0,
            training_seconds: 0.0,
            ..self.clone()
        }
    }
}
