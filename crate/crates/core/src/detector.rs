//! Reconstruction head, per-timestamp anomaly scores and thresholds.
//!
//! The score of timestamp `t` is the mean over features of the squared
//! difference between the reconstructed and the observed normalized value.
//!
//! Quantiles use linear interpolation between order statistics: for sorted
//! scores `x_0 ≤ … ≤ x_{n−1}` and `h = (n−1)·q`, the `q`-quantile is
//! `x_⌊h⌋ + (h − ⌊h⌋)·(x_⌊h⌋+1 − x_⌊h⌋)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::numeric::{Bound, Tape, Tensor, Var};
use crate::tokenizer::{inverse_reorder, Patch, SeriesWindow, TokenOrder, TokenSeries};

pub const HEAD_WEIGHT: &str = "head.recon.weight";
pub const HEAD_BIAS: &str = "head.recon.bias";

/// Linear head mapping hidden states `[n×d]` to patch values `[n×patch_len]`.
pub fn reconstruct(tape: &mut Tape, bound: &Bound, hidden: Var) -> Result<Var> {
    let y = tape.matmul(hidden, bound.var(HEAD_WEIGHT)?)?;
    tape.add_row_bias(y, bound.var(HEAD_BIAS)?)
}

/// Mean squared error between reconstruction and target.
pub fn reconstruction_loss(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(recon, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Anomaly scores of one window, aligned with its timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScores {
    pub start: usize,
    pub scores: Vec<f64>,
}

/// Scores a window from time-major reconstructions `[P·M × patch_len]`.
///
/// The reconstructed rows are mapped back to `(feature, timestamp)` cells
/// through the inverse token permutation.
pub fn scores_from_reconstruction(
    window: &SeriesWindow,
    tokens: &TokenSeries,
    recon: &Tensor,
) -> Result<AnomalyScores> {
    if tokens.order() != TokenOrder::TimeMajor {
        return Err(Error::Contract("scores expect time-major tokens".into()));
    }
    let (n, l) = recon.dims2("reconstruction")?;
    if n != tokens.len() || l != tokens.patch_len() {
        return Err(Error::shape(
            "score_window",
            format!("reconstruction {n}×{l} for {} tokens of length {}", tokens.len(), tokens.patch_len()),
        ));
    }
    let predicted = TokenSeries::from_parts(
        tokens
            .patches()
            .iter()
            .enumerate()
            .map(|(r, p)| Patch {
                feature: p.feature,
                index: p.index,
                values: recon.row(r).to_vec(),
            })
            .collect(),
        TokenOrder::TimeMajor,
        tokens.features(),
        tokens.per_feature(),
        l,
    )?;
    let cells = inverse_reorder(predicted)?.reassemble();
    if cells.len() != window.values().len() {
        return Err(Error::shape("score_window", "window and tokens disagree in size"));
    }
    let m = window.features();
    let scores = cells
        .chunks(m)
        .zip(window.values().chunks(m))
        .map(|(pred, obs)| {
            pred.iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m as f64
        })
        .collect();
    Ok(AnomalyScores {
        start: window.start,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ThresholdPolicy {
    /// `q`-quantile of scores from anomaly-free training data.
    Quantile { q: f64 },
    /// Threshold maximizing F1 against labeled validation scores.
    BestF1,
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ThresholdPolicy::Quantile { q } if !(*q > 0.0 && *q < 1.0) => {
                Err(Error::Config(format!("quantile {q} is outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

/// Linear-interpolation quantile of non-empty scores.
pub fn quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("quantile of no scores".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} is outside [0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Scans every gap between consecutive distinct scores and returns the
/// midpoint threshold with the highest F1 under `score > threshold`. Ties
/// keep the higher threshold. Constant scores return that constant.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("best-F1 threshold of no scores".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "best_f1_threshold",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l).count();
    let mut best = (0.0, scores[idx[0]]);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let v = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == v {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        if k == idx.len() {
            break;
        }
        // everything scored >= v is predicted positive
        let threshold = 0.5 * (v + scores[idx[k]]);
        let f1 = metrics::f1_from_counts(tp, fp, positives - tp);
        if f1 > best.0 {
            best = (f1, threshold);
        }
    }
    Ok(best.1)
}

/// Resolves a policy to a concrete threshold.
///
/// `labels` are required for [`ThresholdPolicy::BestF1`] and ignored otherwise.
pub fn resolve_threshold(scores: &[f64], policy: ThresholdPolicy, labels: Option<&[bool]>) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("cannot resolve a threshold from no scores".into()));
    }
    policy.validate()?;
    match policy {
        ThresholdPolicy::Quantile { q } => quantile(scores, q),
        ThresholdPolicy::BestF1 => {
            let labels = labels.ok_or_else(|| {
                Error::Config("best-F1 thresholding needs labeled scores".into())
            })?;
            best_f1_threshold(scores, labels)
        }
    }
}

/// `score > threshold` per timestamp.
pub fn detect(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

/// Writes `timestamp,score,prediction[,label]` rows with a header line.
pub fn write_score_dump(
    path: &Path,
    timestamps: &[usize],
    scores: &[f64],
    predictions: &[bool],
    labels: Option<&[bool]>,
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if labels.is_some() {
        writeln!(w, "timestamp,score,prediction,label").map_err(io)?;
    } else {
        writeln!(w, "timestamp,score,prediction").map_err(io)?;
    }
    for i in 0..scores.len() {
        write!(w, "{},{:?},{}", timestamps[i], scores[i], predictions[i] as u8).map_err(io)?;
        match labels {
            Some(l) => writeln!(w, ",{}", l[i] as u8).map_err(io)?,
            None => writeln!(w).map_err(io)?,
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{patchify, skip_reorder};

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[7.0; 5], 0.9).unwrap(), 7.0);
        assert!(resolve_threshold(&[], ThresholdPolicy::Quantile { q: 0.5 }, None).is_err());
        assert!(resolve_threshold(&[1.0], ThresholdPolicy::Quantile { q: 1.0 }, None).is_err());
    }

    #[test]
    fn best_f1_separable_midpoint() {
        let scores = [0.1, 0.2, 0.3, 0.9, 1.1];
        let labels = [false, false, false, true, true];
        assert_eq!(best_f1_threshold(&scores, &labels).unwrap(), 0.6);
        assert_eq!(best_f1_threshold(&[2.0, 2.0], &[true, false]).unwrap(), 2.0);
        assert!(matches!(
            resolve_threshold(&scores, ThresholdPolicy::BestF1, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn detect_is_strict() {
        assert_eq!(detect(&[0.5, 1.0, 1.5], 1.0), vec![false, false, true]);
        assert!(detect(&[0.1, 0.2], 5.0).iter().all(|p| !p));
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let values: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let w = SeriesWindow::new(values, 2, 4, 0).unwrap();
        let e = skip_reorder(patchify(&w, 4).unwrap()).unwrap();
        let recon = Tensor::matrix(e.len(), 4, e.value_matrix()).unwrap();
        let s = scores_from_reconstruction(&w, &e, &recon).unwrap();
        assert_eq!(s.scores, vec![0.0; 8]);
    }

    #[test]
    fn single_cell_error_is_local() {
        let values: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let w = SeriesWindow::new(values, 2, 4, 0).unwrap();
        let e = skip_reorder(patchify(&w, 4).unwrap()).unwrap();
        let mut recon = Tensor::matrix(e.len(), 4, e.value_matrix()).unwrap();
        // token (feature 1, index 1) sits at row 1·2 + 1 = 3; its value 2 is timestamp 6
        recon.data_mut()[3 * 4 + 2] += 1.0;
        let s = scores_from_reconstruction(&w, &e, &recon).unwrap();
        for (t, v) in s.scores.iter().enumerate() {
            if t == 6 {
                assert!((v - 0.5).abs() < 1e-15);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        recon.data_mut()[3 * 4 + 2] += 1.0;
        let doubled = scores_from_reconstruction(&w, &e, &recon).unwrap();
        assert!(doubled.scores[6] > s.scores[6]);
    }
}
