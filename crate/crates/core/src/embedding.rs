//! Token embedding: the sum of a value projection, two positional codes and a
//! projected feature representation.
//!
//! For patch `(feature j, index i)` of a window with `M` features and `P`
//! patches per feature the token vector is
//!
//! ```text
//! value(s) + code_patch(j·P + i) + code_skip(i·M + j) + feature(enc(s))
//! ```
//!
//! and tokens are emitted in time-major order, so row `i·M + j` holds
//! patch `(j, i)`. The two positional codes place the patch in the
//! feature-major and the time-major sequence respectively.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Bound, Tape, Tensor, Var};
use crate::tokenizer::{skip_reorder, TokenOrder, TokenSeries};

pub const VALUE_WEIGHT: &str = "embed.value.weight";
pub const FEATURE_WEIGHT: &str = "embed.feature.weight";

const PATCH_CODE_BASE: f64 = 10_000.0;
const SKIP_CODE_BASE: f64 = 1_000.0;

/// Which additive terms enter the token embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingTerms {
    /// Positional code of the time-major (skip) order.
    pub skip: bool,
    /// Projected contrastive representation.
    pub feature: bool,
}

impl Default for EmbeddingTerms {
    fn default() -> Self {
        Self {
            skip: true,
            feature: true,
        }
    }
}

/// Sinusoidal code of the feature-major position: `sin`/`cos` pairs with
/// frequencies `10000^(−2k/d)`. Position 0 gives `[0, 1, 0, 1, ...]`.
pub fn positional_code(position: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|c| {
            let k = (c / 2) as f64;
            let angle = position as f64 * PATCH_CODE_BASE.powf(-2.0 * k / d_model as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Sinusoidal code of the time-major position. Uses base 1000 and
/// frequencies shifted by half a step, `1000^(−(2k+1)/d)`, so the two code
/// families never coincide.
pub fn skip_positional_code(position: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|c| {
            let k = (c / 2) as f64;
            let angle = position as f64 * SKIP_CODE_BASE.powf(-(2.0 * k + 1.0) / d_model as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Integrated token vectors in time-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub vectors: Tensor,
    /// `(feature, index)` of every row.
    pub provenance: Vec<(usize, usize)>,
}

/// The separate additive terms of a token embedding, each `[P·M × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingComponents {
    pub value: Tensor,
    pub patch_code: Tensor,
    pub skip_code: Tensor,
    pub feature: Tensor,
}

/// Projects patches `[n×L]` with `W[L×d]`. There is no bias, so a zero patch maps to zero.
pub fn value_projection(tape: &mut Tape, patches: Var, weight: Var) -> Result<Var> {
    tape.matmul(patches, weight)
}

/// Sum of the enabled positional codes for a time-major series, `[n×d]`.
pub fn positional_matrix(e: &TokenSeries, d_model: usize, terms: EmbeddingTerms) -> Result<Tensor> {
    let (patch, skip) = code_matrices(e, d_model)?;
    if !terms.skip {
        return Ok(patch);
    }
    let data = patch.data().iter().zip(skip.data()).map(|(a, b)| a + b).collect();
    Tensor::new(patch.shape().to_vec(), data)
}

fn code_matrices(e: &TokenSeries, d_model: usize) -> Result<(Tensor, Tensor)> {
    if e.order() != TokenOrder::TimeMajor {
        return Err(Error::Contract("token embedding expects a time-major series".into()));
    }
    let (m, p) = (e.features(), e.per_feature());
    let mut patch = Vec::with_capacity(e.len() * d_model);
    let mut skip = Vec::with_capacity(e.len() * d_model);
    for tok in e.patches() {
        patch.extend(positional_code(tok.feature * p + tok.index, d_model));
        skip.extend(skip_positional_code(tok.index * m + tok.feature, d_model));
    }
    Ok((
        Tensor::matrix(e.len(), d_model, patch)?,
        Tensor::matrix(e.len(), d_model, skip)?,
    ))
}

/// Records the token embedding of a time-major series on `tape`.
///
/// `reprs` holds one contrastive representation per row of `e`; it is
/// required when the feature term is enabled.
pub fn embed_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    e: &TokenSeries,
    reprs: Option<&Tensor>,
    d_model: usize,
    terms: EmbeddingTerms,
) -> Result<Var> {
    let x = tape.constant(Tensor::matrix(e.len(), e.patch_len(), e.value_matrix())?);
    let value = value_projection(tape, x, bound.var(VALUE_WEIGHT)?)?;
    let codes = tape.constant(positional_matrix(e, d_model, terms)?);
    let mut tokens = tape.add(value, codes)?;
    if terms.feature {
        let reprs = reprs.ok_or_else(|| {
            Error::Contract("feature term enabled but no representations given".into())
        })?;
        if reprs.dims2("feature representations")?.0 != e.len() {
            return Err(Error::shape(
                "embed",
                format!("{} representations for {} tokens", reprs.shape()[0], e.len()),
            ));
        }
        let r = tape.constant(reprs.clone());
        let feat = tape.matmul(r, bound.var(FEATURE_WEIGHT)?)?;
        tokens = tape.add(tokens, feat)?;
    }
    Ok(tokens)
}

/// Computes every term separately, with disabled terms left at zero.
pub fn components(
    s: &TokenSeries,
    value_weight: &Tensor,
    feature_weight: &Tensor,
    reprs_feature_major: Option<&Tensor>,
    terms: EmbeddingTerms,
) -> Result<EmbeddingComponents> {
    let e = skip_reorder(s.clone())?;
    let d = value_weight.dims2("value weight")?.1;
    let x = Tensor::matrix(e.len(), e.patch_len(), e.value_matrix())?;
    let value = crate::numeric::matmul_plain(&x, value_weight)?;
    let (patch_code, mut skip_code) = code_matrices(&e, d)?;
    if !terms.skip {
        skip_code = Tensor::zeros(&[e.len(), d]);
    }
    let feature = match (terms.feature, reprs_feature_major) {
        (true, Some(r)) => {
            let r = reorder_rows(s, r)?;
            crate::numeric::matmul_plain(&r, feature_weight)?
        }
        (true, None) => {
            return Err(Error::Contract("feature term enabled but no representations given".into()))
        }
        (false, _) => Tensor::zeros(&[e.len(), d]),
    };
    Ok(EmbeddingComponents {
        value,
        patch_code,
        skip_code,
        feature,
    })
}

/// Reorders per-patch rows given in feature-major order into time-major order.
pub fn reorder_rows(s: &TokenSeries, rows: &Tensor) -> Result<Tensor> {
    if s.order() != TokenOrder::FeatureMajor {
        return Err(Error::Contract("reorder_rows expects a feature-major series".into()));
    }
    let (n, w) = rows.dims2("reorder_rows")?;
    if n != s.len() {
        return Err(Error::shape("reorder_rows", format!("{n} rows for {} tokens", s.len())));
    }
    let mut out = vec![0.0; n * w];
    for (pos, p) in s.patches().iter().enumerate() {
        let dst = p.index * s.features() + p.feature;
        out[dst * w..(dst + 1) * w].copy_from_slice(rows.row(pos));
    }
    Tensor::matrix(n, w, out)
}

/// Token embedding of a feature-major series, emitted in time-major order.
///
/// `reprs_feature_major` holds one representation per patch in the order of `s`.
pub fn compose_token_embeddings(
    s: &TokenSeries,
    value_weight: &Tensor,
    feature_weight: &Tensor,
    reprs_feature_major: Option<&Tensor>,
    terms: EmbeddingTerms,
) -> Result<EmbeddingSequence> {
    let c = components(s, value_weight, feature_weight, reprs_feature_major, terms)?;
    let e = skip_reorder(s.clone())?;
    let mut out = c.value.into_data();
    for (o, (a, b)) in out.iter_mut().zip(c.patch_code.data().iter().zip(c.skip_code.data())) {
        *o += if terms.skip { a + b } else { *a };
    }
    if terms.feature {
        out.iter_mut().zip(c.feature.data()).for_each(|(o, f)| *o += f);
    }
    let d = value_weight.shape()[1];
    Ok(EmbeddingSequence {
        vectors: Tensor::matrix(e.len(), d, out)?,
        provenance: e.patches().iter().map(|p| (p.feature, p.index)).collect(),
    })
}
