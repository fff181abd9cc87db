//! Windows, patches and the two token orders.
//!
//! Indices are zero-based throughout. For a window with `M` features split
//! into `P` patches per feature, patch `(feature j, index i)` sits at
//!
//! * position `j·P + i` in [`TokenOrder::FeatureMajor`] order (all patches of
//!   feature 0, then feature 1, ...), and
//! * position `i·M + j` in [`TokenOrder::TimeMajor`] order (the patches of
//!   every feature for time period 0, then period 1, ...).
//!
//! [`skip_reorder`] and [`inverse_reorder`] convert between the two by moving
//! patches, never touching their values.

use serde::{Deserialize, Serialize};

use crate::data::Series;
use crate::error::{Error, Result};

/// Per-feature z-score statistics taken from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Features whose training std falls below this are treated as constant.
pub const CONSTANT_STD: f64 = 1e-12;

impl NormStats {
    pub fn fit(train: &Series) -> Result<Self> {
        let (t, m) = (train.len(), train.features());
        if t == 0 {
            return Err(Error::InsufficientData("cannot fit statistics on an empty series".into()));
        }
        let mut mean = vec![0.0; m];
        for row in train.rows() {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= t as f64);
        let mut var = vec![0.0; m];
        for row in train.rows() {
            for j in 0..m {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / t as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn is_constant(&self, feature: usize) -> bool {
        self.std[feature] < CONSTANT_STD
    }

    pub fn normalize_value(&self, feature: usize, v: f64) -> f64 {
        if self.is_constant(feature) {
            0.0
        } else {
            (v - self.mean[feature]) / self.std[feature]
        }
    }

    pub fn denormalize_value(&self, feature: usize, z: f64) -> f64 {
        if self.is_constant(feature) {
            self.mean[feature]
        } else {
            z * self.std[feature] + self.mean[feature]
        }
    }

    /// Standardizes a whole series.
    pub fn normalize(&self, series: &Series) -> Result<Series> {
        self.check_width(series.features())?;
        let m = series.features();
        let data = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.normalize_value(i % m, v))
            .collect();
        Series::new(series.len(), m, data)
    }

    pub fn denormalize(&self, series: &Series) -> Result<Series> {
        self.check_width(series.features())?;
        let m = series.features();
        let data = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.denormalize_value(i % m, v))
            .collect();
        Series::new(series.len(), m, data)
    }

    fn check_width(&self, m: usize) -> Result<()> {
        if m != self.features() {
            return Err(Error::shape(
                "normalize",
                format!("statistics for {} features, series has {m}", self.features()),
            ));
        }
        Ok(())
    }
}

/// A contiguous, normalized slice of a series: `len` timestamps × `features`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    values: Vec<f64>,
    len: usize,
    features: usize,
    pub start: usize,
    pub labels: Option<Vec<bool>>,
}

impl SeriesWindow {
    /// Wraps already-normalized row-major values, checking tiling and finiteness.
    pub fn new(values: Vec<f64>, features: usize, patch_len: usize, start: usize) -> Result<Self> {
        if features == 0 || patch_len == 0 {
            return Err(Error::Parameter("features and patch length must be positive".into()));
        }
        if values.len() % features != 0 {
            return Err(Error::shape("window", "values do not fill whole rows"));
        }
        let len = values.len() / features;
        if len == 0 || len % patch_len != 0 {
            return Err(Error::WindowSize { len, patch_len });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "normalize_window" });
        }
        Ok(Self {
            values,
            len,
            features,
            start,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.len {
            return Err(Error::shape(
                "window labels",
                format!("{} labels for {} timestamps", labels.len(), self.len),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, feature: usize) -> f64 {
        self.values[t * self.features + feature]
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, feature)).collect()
    }
}

/// Standardizes rows `start..start+len` of a raw series with training statistics.
pub fn normalize_window(
    raw: &Series,
    stats: &NormStats,
    start: usize,
    len: usize,
    patch_len: usize,
) -> Result<SeriesWindow> {
    if patch_len == 0 || len % patch_len != 0 || len == 0 {
        return Err(Error::WindowSize { len, patch_len });
    }
    if start + len > raw.len() {
        return Err(Error::shape(
            "normalize_window",
            format!("rows {start}..{} of {}", start + len, raw.len()),
        ));
    }
    stats.check_width(raw.features())?;
    let m = raw.features();
    let values = raw.values()[start * m..(start + len) * m]
        .iter()
        .enumerate()
        .map(|(i, &v)| stats.normalize_value(i % m, v))
        .collect();
    SeriesWindow::new(values, m, patch_len, start)
}

/// Start offsets of the non-overlapping windows tiling `total` rows, and the
/// number of trailing rows that do not fill a whole window.
pub fn tile_windows(total: usize, window_len: usize, stride: usize) -> (Vec<usize>, usize) {
    if window_len == 0 || stride == 0 || total < window_len {
        return (Vec::new(), total);
    }
    let starts: Vec<usize> = (0..=total - window_len).step_by(stride).collect();
    let covered = starts.last().map_or(0, |s| s + window_len);
    (starts, total - covered)
}

/// One fixed-length segment of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub feature: usize,
    pub index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenOrder {
    FeatureMajor,
    TimeMajor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeries {
    patches: Vec<Patch>,
    order: TokenOrder,
    features: usize,
    per_feature: usize,
    patch_len: usize,
}

impl TokenSeries {
    /// Builds a series from patches already laid out in `order`.
    pub(crate) fn from_parts(
        patches: Vec<Patch>,
        order: TokenOrder,
        features: usize,
        per_feature: usize,
        patch_len: usize,
    ) -> Result<Self> {
        if patches.len() != features * per_feature {
            return Err(Error::shape(
                "token series",
                format!("{} patches for {features}×{per_feature}", patches.len()),
            ));
        }
        let s = TokenSeries {
            patches,
            order,
            features,
            per_feature,
            patch_len,
        };
        for (pos, p) in s.patches.iter().enumerate() {
            if p.values.len() != patch_len
                || p.feature >= features
                || p.index >= per_feature
                || s.position(p.feature, p.index) != pos
            {
                return Err(Error::Contract(format!(
                    "patch ({}, {}) misplaced at position {pos}",
                    p.feature, p.index
                )));
            }
        }
        Ok(s)
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn into_patches(self) -> Vec<Patch> {
        self.patches
    }

    pub fn order(&self) -> TokenOrder {
        self.order
    }

    /// Feature count `M`.
    pub fn features(&self) -> usize {
        self.features
    }

    /// Patches per feature `P`.
    pub fn per_feature(&self) -> usize {
        self.per_feature
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Position of patch `(feature, index)` in this series' order.
    pub fn position(&self, feature: usize, index: usize) -> usize {
        match self.order {
            TokenOrder::FeatureMajor => feature * self.per_feature + index,
            TokenOrder::TimeMajor => index * self.features + feature,
        }
    }

    pub fn patch(&self, feature: usize, index: usize) -> &Patch {
        &self.patches[self.position(feature, index)]
    }

    /// Concatenates each feature's patches back into a row-major window matrix.
    pub fn reassemble(&self) -> Vec<f64> {
        let (m, l) = (self.features, self.patch_len);
        let t = self.per_feature * l;
        let mut out = vec![0.0; t * m];
        for p in &self.patches {
            for (k, v) in p.values.iter().enumerate() {
                out[(p.index * l + k) * m + p.feature] = *v;
            }
        }
        out
    }

    /// Row-major `[len × patch_len]` matrix of patch values in sequence order.
    pub fn value_matrix(&self) -> Vec<f64> {
        self.patches.iter().flat_map(|p| p.values.iter().copied()).collect()
    }
}

/// Splits each feature of the window into consecutive non-overlapping patches,
/// emitted feature by feature.
pub fn patchify(window: &SeriesWindow, patch_len: usize) -> Result<TokenSeries> {
    if patch_len == 0 || window.len() % patch_len != 0 {
        return Err(Error::WindowSize {
            len: window.len(),
            patch_len,
        });
    }
    let (m, p) = (window.features(), window.len() / patch_len);
    let mut patches = Vec::with_capacity(m * p);
    for feature in 0..m {
        for index in 0..p {
            let values = (0..patch_len)
                .map(|k| window.get(index * patch_len + k, feature))
                .collect();
            patches.push(Patch {
                feature,
                index,
                values,
            });
        }
    }
    Ok(TokenSeries {
        patches,
        order: TokenOrder::FeatureMajor,
        features: m,
        per_feature: p,
        patch_len,
    })
}

/// Closed-form destination of feature-major position `pos` in time-major order.
pub fn skip_position(pos: usize, per_feature: usize, features: usize) -> usize {
    let (feature, index) = (pos / per_feature, pos % per_feature);
    index * features + feature
}

fn permute(s: TokenSeries, to: TokenOrder) -> TokenSeries {
    let TokenSeries {
        patches,
        features,
        per_feature,
        patch_len,
        ..
    } = s;
    let mut slots: Vec<Option<Patch>> = (0..patches.len()).map(|_| None).collect();
    for p in patches {
        let dst = match to {
            TokenOrder::TimeMajor => p.index * features + p.feature,
            TokenOrder::FeatureMajor => p.feature * per_feature + p.index,
        };
        slots[dst] = Some(p);
    }
    TokenSeries {
        patches: slots.into_iter().map(|p| p.expect("bijective layout")).collect(),
        order: to,
        features,
        per_feature,
        patch_len,
    }
}

/// Reorders a feature-major series so that patches of the same time period are adjacent.
pub fn skip_reorder(s: TokenSeries) -> Result<TokenSeries> {
    if s.order != TokenOrder::FeatureMajor {
        return Err(Error::Contract("skip_reorder expects a feature-major series".into()));
    }
    Ok(permute(s, TokenOrder::TimeMajor))
}

/// Exact inverse of [`skip_reorder`].
pub fn inverse_reorder(e: TokenSeries) -> Result<TokenSeries> {
    if e.order != TokenOrder::TimeMajor {
        return Err(Error::Contract("inverse_reorder expects a time-major series".into()));
    }
    Ok(permute(e, TokenOrder::FeatureMajor))
}
