//! Feature embedding: a dilated causal convolution encoder trained with a
//! patch-based InfoNCE triplet loss.
//!
//! For every feature one anchor patch and one positive patch (same feature,
//! different index) are drawn, plus `N` negative patches taken from other
//! features. With cosine similarity `f`, the per-feature loss is
//!
//! ```text
//! L = −log( exp f(a, p) / (exp f(a, p) + Σ_j exp f(a, n_j)) )
//! ```
//!
//! and a training step minimizes the mean of the per-feature losses.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Adam, Bound, Optimizer, ParameterStore, Tape, Tensor, Var};
use crate::tokenizer::TokenSeries;

/// Checkpoint section name of encoder parameters.
pub const ENCODER_SECTION: &str = "contrastive-encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub repr_dim: usize,
    /// Negative-side slope of the leaky ReLU after every convolution.
    pub slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            channels: 32,
            kernel: 3,
            repr_dim: 64,
            slope: 0.01,
        }
    }
}

impl EncoderConfig {
    /// Dilation of block `k` is `2^k`.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.blocks).map(|k| 1 << k).collect()
    }

    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations().iter().sum::<usize>()
    }

    pub fn validate(&self, patch_len: usize) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.kernel == 0 || self.repr_dim == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.blocks > 16 {
            return Err(Error::Config("encoder depth above 16 blocks".into()));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config("leaky slope must lie in [0, 1)".into()));
        }
        if self.receptive_field() < patch_len {
            warn!(
                "encoder receptive field {} is shorter than the patch length {patch_len}",
                self.receptive_field()
            );
        }
        Ok(())
    }
}

fn conv_w(b: usize) -> String {
    format!("enc.block{b}.conv.weight")
}

fn conv_b(b: usize) -> String {
    format!("enc.block{b}.conv.bias")
}

const HEAD_W: &str = "enc.head.weight";
const HEAD_B: &str = "enc.head.bias";

/// Fresh encoder parameters (He-normal convolutions, zero biases).
pub fn init_encoder<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> ParameterStore {
    let mut store = ParameterStore::new();
    for b in 0..cfg.blocks {
        let cin = if b == 0 { 1 } else { cfg.channels };
        let std = (2.0 / (cin * cfg.kernel) as f64).sqrt();
        store.insert(conv_w(b), Tensor::randn(&[cfg.channels, cin, cfg.kernel], std, rng), false);
        store.insert(conv_b(b), Tensor::zeros(&[cfg.channels]), false);
    }
    let std = 1.0 / (cfg.channels as f64).sqrt();
    store.insert(HEAD_W, Tensor::randn(&[cfg.channels, cfg.repr_dim], std, rng), false);
    store.insert(HEAD_B, Tensor::zeros(&[cfg.repr_dim]), false);
    store
}

/// Runs the convolution stack on `batch` patches stacked row-major
/// (`batch × patch_len`) and returns the pre-pooling map `[B×C×L]`.
pub fn encode_feature_maps(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    patches: Var,
) -> Result<Var> {
    let (batch, len) = tape.value(patches).dims2("encoder input")?;
    let mut h = tape.reshape(patches, vec![batch, 1, len])?;
    for (b, dilation) in cfg.dilations().into_iter().enumerate() {
        let conv = tape.conv1d_causal(h, bound.var(&conv_w(b))?, dilation)?;
        let conv = tape.add_channel_bias(conv, bound.var(&conv_b(b))?)?;
        let act = tape.leaky_relu(conv, cfg.slope)?;
        h = if b == 0 { act } else { tape.add(h, act)? };
    }
    Ok(h)
}

/// Encodes stacked patches `[B×L]` into representations `[B×repr_dim]`.
pub fn encode_batch(tape: &mut Tape, bound: &Bound, cfg: &EncoderConfig, patches: Var) -> Result<Var> {
    let maps = encode_feature_maps(tape, bound, cfg, patches)?;
    let pooled = tape.max_pool_time(maps)?;
    let z = tape.matmul(pooled, bound.var(HEAD_W)?)?;
    tape.add_row_bias(z, bound.var(HEAD_B)?)
}

/// Representation of a single patch.
pub fn encode_patch(patch: &[f64], params: &ParameterStore, cfg: &EncoderConfig, patch_len: usize) -> Result<Vec<f64>> {
    if patch.len() != patch_len {
        return Err(Error::Contract(format!(
            "patch has {} values, expected {patch_len}",
            patch.len()
        )));
    }
    Ok(encode_rows(&[patch], params, cfg)?.into_data())
}

/// Representations of many patches `[B×repr_dim]`, without gradients.
pub fn encode_rows(rows: &[&[f64]], params: &ParameterStore, cfg: &EncoderConfig) -> Result<Tensor> {
    let len = rows.first().map_or(0, |r| r.len());
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let x = tape.constant(Tensor::matrix(rows.len(), len, data)?);
    let z = encode_batch(&mut tape, &bound, cfg, x)?;
    Ok(tape.value(z).clone())
}

/// `uᵀv / (‖u‖₂·‖v‖₂)`; a zero vector is a degenerate-vector error.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("cosine_similarity"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Patch identity `(feature, index)`, zero-based.
pub type PatchId = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: PatchId,
    pub positive: PatchId,
    pub negatives: Vec<PatchId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    /// One entry per feature, in feature order.
    pub triplets: Vec<Triplet>,
    /// Negative features were drawn with replacement because `N > M − 1`.
    pub with_replacement: bool,
}

/// Draws one triplet per feature.
///
/// Negative features are distinct when `n ≤ M − 1` and drawn with
/// replacement otherwise; every negative uses a uniformly drawn patch index.
pub fn sample_triplets<R: Rng + ?Sized>(s: &TokenSeries, n: usize, rng: &mut R) -> Result<TripletBatch> {
    let (m, p) = (s.features(), s.per_feature());
    if p < 2 {
        return Err(Error::InsufficientData(format!(
            "{p} patch per feature; a positive needs at least 2"
        )));
    }
    if m < 2 {
        return Err(Error::InsufficientData(format!(
            "{m} feature; negatives need at least 2"
        )));
    }
    if n == 0 {
        return Err(Error::Config("the number of negatives must be positive".into()));
    }
    let with_replacement = n > m - 1;
    if with_replacement {
        debug!("N = {n} exceeds M − 1 = {}; sampling negative features with replacement", m - 1);
    }
    let mut triplets = Vec::with_capacity(m);
    for feature in 0..m {
        let a = rng.random_range(0..p);
        let mut q = rng.random_range(0..p - 1);
        if q >= a {
            q += 1;
        }
        let others: Vec<usize> = if with_replacement {
            (0..n).map(|_| skip_feature(rng.random_range(0..m - 1), feature)).collect()
        } else {
            rand::seq::index::sample(rng, m - 1, n)
                .into_iter()
                .map(|k| skip_feature(k, feature))
                .collect()
        };
        let negatives = others
            .into_iter()
            .map(|f| (f, rng.random_range(0..p)))
            .collect();
        triplets.push(Triplet {
            anchor: (feature, a),
            positive: (feature, q),
            negatives,
        });
    }
    Ok(TripletBatch {
        triplets,
        with_replacement,
    })
}

/// Maps `k ∈ [0, M−1)` onto the features other than `skip`.
fn skip_feature(k: usize, skip: usize) -> usize {
    if k >= skip {
        k + 1
    } else {
        k
    }
}

/// Loss for one triplet block: rows `[anchor, positive, negatives...]`.
fn triplet_block_loss(tape: &mut Tape, block: Var) -> Result<Var> {
    let rows = tape.value(block).dims2("triplet block")?.0;
    let norms = tape.l2_norm_rows(block)?;
    let unit = tape.div_rows(block, norms)?;
    let anchor = tape.slice_rows(unit, 0, 1)?;
    let others = tape.slice_rows(unit, 1, rows - 1)?;
    let others_t = tape.transpose(others)?;
    let sims = tape.matmul(anchor, others_t)?;
    let probs = tape.softmax(sims)?;
    let p_pos = tape.slice_cols(probs, 0, 1)?;
    let log_p = tape.log(p_pos)?;
    let loss = tape.scale(log_p, -1.0)?;
    tape.reshape(loss, vec![])
}

/// InfoNCE triplet loss over representation vectors recorded on `tape`.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, positive: Var, negatives: &[Var]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::InsufficientData("triplet loss needs at least one negative".into()));
    }
    let mut rows = Vec::with_capacity(negatives.len() + 2);
    for v in std::iter::once(anchor).chain(std::iter::once(positive)).chain(negatives.iter().copied()) {
        let d = tape.value(v).numel();
        rows.push(tape.reshape(v, vec![1, d])?);
    }
    let block = tape.concat_rows(&rows)?;
    triplet_block_loss(tape, block)
}

/// Value of the triplet loss for plain vectors.
pub fn triplet_loss_value(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(anchor.to_vec()));
    let p = tape.constant(Tensor::vector(positive.to_vec()));
    let ns: Vec<Var> = negatives
        .iter()
        .map(|n| tape.constant(Tensor::vector(n.clone())))
        .collect();
    let l = triplet_loss(&mut tape, a, p, &ns)?;
    tape.value(l).item()
}

/// Stacks the patches named by a batch, triplet after triplet.
fn gather_batch(s: &TokenSeries, batch: &TripletBatch) -> Result<Tensor> {
    let l = s.patch_len();
    let mut data = Vec::new();
    let mut rows = 0;
    for t in &batch.triplets {
        for &(f, i) in std::iter::once(&t.anchor)
            .chain(std::iter::once(&t.positive))
            .chain(&t.negatives)
        {
            data.extend_from_slice(&s.patch(f, i).values);
            rows += 1;
        }
    }
    Tensor::matrix(rows, l, data)
}

/// Mean per-feature triplet loss of one token series, recorded on `tape`.
pub fn epoch_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    s: &TokenSeries,
    bound: &Bound,
    cfg: &EncoderConfig,
    n: usize,
    rng: &mut R,
) -> Result<(Var, TripletBatch)> {
    let batch = sample_triplets(s, n, rng)?;
    let x = tape.constant(gather_batch(s, &batch)?);
    let reprs = encode_batch(tape, bound, cfg, x)?;
    let block = n + 2;
    let mut losses = Vec::with_capacity(batch.triplets.len());
    for k in 0..batch.triplets.len() {
        let rows = tape.slice_rows(reprs, k * block, block)?;
        let l = triplet_block_loss(tape, rows)?;
        losses.push(tape.reshape(l, vec![1, 1])?);
    }
    let stacked = tape.concat_rows(&losses)?;
    Ok((tape.mean(stacked)?, batch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainOptions {
    pub n_negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Token series averaged into one optimizer step.
    pub windows_per_step: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderTraining {
    pub params: ParameterStore,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub with_replacement: bool,
    pub steps: usize,
}

/// Trains a freshly initialized encoder on the given token series.
///
/// Touches nothing but the encoder parameters it creates.
pub fn train_encoder(
    windows: &[TokenSeries],
    cfg: &EncoderConfig,
    opts: &EncoderTrainOptions,
) -> Result<EncoderTraining> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InsufficientData("no training windows for the encoder".into()))?;
    cfg.validate(first.patch_len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = init_encoder(cfg, &mut rng);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut with_replacement = false;
    let mut steps = 0;
    let per_step = opts.windows_per_step.max(1);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for group in order.chunks(per_step) {
            let weight = 1.0 / group.len() as f64;
            for &w in group {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let (loss, batch) = epoch_loss(&mut tape, &windows[w], &bound, cfg, opts.n_negatives, &mut rng)
                    .map_err(|e| diverged(e, epoch, steps))?;
                with_replacement |= batch.with_replacement;
                let value = tape.value(loss).item()?;
                total += value;
                let mut grads = tape.backward(loss)?;
                params.accumulate(&bound, &mut grads, weight)?;
            }
            adam.step(&mut params).map_err(|e| diverged(e, epoch, steps))?;
            steps += 1;
        }
        let mean = total / windows.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("encoder loss {mean} at epoch {epoch}")));
        }
        debug!("encoder epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(EncoderTraining {
        params,
        epoch_losses,
        with_replacement,
        steps,
    })
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence(format!(
            "encoder training produced a non-finite value in {op} (epoch {epoch}, step {step})"
        )),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{patchify, SeriesWindow};

    fn series(m: usize, p: usize, l: usize) -> TokenSeries {
        let values = (0..m * p * l).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect();
        patchify(&SeriesWindow::new(values, m, l, 0).unwrap(), l).unwrap()
    }

    #[test]
    fn cosine_closed_forms() {
        assert!((cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let want = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.974_631_846).abs() < 1e-9);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn zero_patch_maps_to_zero() {
        let cfg = EncoderConfig::default();
        let params = init_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let z = encode_patch(&[0.0; 16], &params, &cfg, 16).unwrap();
        assert_eq!(z.len(), cfg.repr_dim);
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(encode_patch(&[0.0; 15], &params, &cfg, 16).is_err());
    }

    #[test]
    fn identical_patches_identical_reprs() {
        let cfg = EncoderConfig::default();
        let params = init_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let patch: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let z = encode_rows(&[&patch, &patch], &params, &cfg).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn receptive_field_of_defaults() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.dilations(), vec![1, 2, 4]);
        assert_eq!(cfg.receptive_field(), 15);
    }

    #[test]
    fn sampler_respects_feature_rules() {
        let s = series(5, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let b = sample_triplets(&s, 3, &mut rng).unwrap();
            assert!(!b.with_replacement);
            for (f, t) in b.triplets.iter().enumerate() {
                assert_eq!(t.anchor.0, f);
                assert_eq!(t.positive.0, f);
                assert_ne!(t.anchor.1, t.positive.1);
                assert_eq!(t.negatives.len(), 3);
                let mut feats: Vec<usize> = t.negatives.iter().map(|n| n.0).collect();
                assert!(feats.iter().all(|&g| g != f));
                feats.sort_unstable();
                feats.dedup();
                assert_eq!(feats.len(), 3);
            }
        }
    }

    #[test]
    fn sampler_forced_choice_and_fallback() {
        let s = series(2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_triplets(&s, 1, &mut rng).unwrap();
        assert_eq!(b.triplets[0].negatives[0].0, 1);
        assert_eq!(b.triplets[1].negatives[0].0, 0);
        let b = sample_triplets(&s, 3, &mut rng).unwrap();
        assert!(b.with_replacement);
        assert!(b.triplets[0].negatives.iter().all(|n| n.0 == 1));
    }

    #[test]
    fn sampler_needs_two_patches_and_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_triplets(&series(3, 1, 4), 1, &mut rng),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            sample_triplets(&series(1, 4, 4), 1, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let s = series(4, 4, 2);
        let a = sample_triplets(&s, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_triplets(&s, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_closed_forms() {
        let a = vec![1.0, 0.0];
        let l = triplet_loss_value(&a, &[0.0, 1.0], &[vec![0.0, 2.0], vec![0.0, -1.0], vec![0.0, 0.5]]).unwrap();
        assert!((l - 4f64.ln()).abs() <= 1e-12);
        let l = triplet_loss_value(&a, &[3.0, 0.0], &[vec![-1.0, 0.0]]).unwrap();
        assert!((l - (1.0 + (-2f64).exp()).ln()).abs() <= 1e-12);
        assert!((l - 0.126_928_0).abs() < 1e-7);
    }

    #[test]
    fn epoch_loss_needs_two_features() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = init_encoder(&cfg, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        assert!(matches!(
            epoch_loss(&mut tape, &series(1, 4, 16), &bound, &cfg, 1, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = EncoderConfig::default();
        let opts = EncoderTrainOptions {
            n_negatives: 1,
            epochs: 0,
            lr: 1e-3,
            seed: 42,
            windows_per_step: 1,
        };
        let trained = train_encoder(&[series(2, 2, 16)], &cfg, &opts).unwrap();
        let init = init_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(trained.params, init);
        assert!(trained.epoch_losses.is_empty());
    }
}
