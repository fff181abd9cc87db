//! A small pre-norm GPT-style transformer with a freeze contract: attention
//! and feed-forward weights are frozen after pre-training, layer norms, the
//! embedding projections and the reconstruction head stay trainable.

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector;
use crate::embedding::{self, EmbeddingTerms};
use crate::error::{Error, Result};
use crate::numeric::{Adam, Bound, Optimizer, ParameterStore, Tape, Tensor, Var};
use crate::tokenizer::TokenSeries;

/// Checkpoint section name of the full detection model.
pub const MODEL_SECTION: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 128,
            d_ff: 256,
            max_seq: 512,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_seq < seq_len {
            return Err(Error::Config(format!(
                "max_seq {} is shorter than the {seq_len} tokens of a window",
                self.max_seq
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        Ok(())
    }
}

fn p(layer: usize, name: &str) -> String {
    format!("blk{layer}.{name}")
}

/// Attention and feed-forward tensors are frozen; everything else trains.
pub fn is_frozen_name(name: &str) -> bool {
    name.contains(".attn.") || name.contains(".ff.")
}

/// Backbone tensors plus the trainable embedding projections and reconstruction head.
pub fn init_model<R: Rng + ?Sized>(
    cfg: &BackboneConfig,
    patch_len: usize,
    repr_dim: usize,
    rng: &mut R,
) -> ParameterStore {
    let mut s = ParameterStore::new();
    let d = cfg.d_model;
    let std = 0.02;
    let resid_std = 0.02 / (2.0 * cfg.layers.max(1) as f64).sqrt();
    for l in 0..cfg.layers {
        s.insert(p(l, "ln1.gain"), Tensor::filled(&[d], 1.0), false);
        s.insert(p(l, "ln1.bias"), Tensor::zeros(&[d]), false);
        for w in ["attn.wq", "attn.wk", "attn.wv"] {
            s.insert(p(l, w), Tensor::randn(&[d, d], std, rng), false);
        }
        s.insert(p(l, "attn.wo"), Tensor::randn(&[d, d], resid_std, rng), false);
        s.insert(p(l, "ln2.gain"), Tensor::filled(&[d], 1.0), false);
        s.insert(p(l, "ln2.bias"), Tensor::zeros(&[d]), false);
        s.insert(p(l, "ff.w1"), Tensor::randn(&[d, cfg.d_ff], std, rng), false);
        s.insert(p(l, "ff.b1"), Tensor::zeros(&[cfg.d_ff]), false);
        s.insert(p(l, "ff.w2"), Tensor::randn(&[cfg.d_ff, d], resid_std, rng), false);
        s.insert(p(l, "ff.b2"), Tensor::zeros(&[d]), false);
    }
    s.insert("ln_f.gain", Tensor::filled(&[d], 1.0), false);
    s.insert("ln_f.bias", Tensor::zeros(&[d]), false);
    s.insert(
        embedding::VALUE_WEIGHT,
        Tensor::randn(&[patch_len, d], 1.0 / (patch_len as f64).sqrt(), rng),
        false,
    );
    s.insert(
        embedding::FEATURE_WEIGHT,
        Tensor::randn(&[repr_dim, d], 0.1 / (repr_dim as f64).sqrt(), rng),
        false,
    );
    s.insert(
        detector::HEAD_WEIGHT,
        Tensor::randn(&[d, patch_len], 1.0 / (d as f64).sqrt(), rng),
        false,
    );
    s.insert(detector::HEAD_BIAS, Tensor::zeros(&[patch_len]), false);
    s
}

/// Hidden states of one block, plus its per-head attention matrices.
struct BlockOut {
    hidden: Var,
    attention: Vec<Var>,
}

fn block(tape: &mut Tape, bound: &Bound, cfg: &BackboneConfig, l: usize, h: Var) -> Result<BlockOut> {
    let n = tape.value(h).dims2("backbone block")?.0;
    let dh = cfg.d_model / cfg.heads;
    let a = tape.layer_norm(h, bound.var(&p(l, "ln1.gain"))?, bound.var(&p(l, "ln1.bias"))?, cfg.ln_eps)?;
    let q = tape.matmul(a, bound.var(&p(l, "attn.wq"))?)?;
    let k = tape.matmul(a, bound.var(&p(l, "attn.wk"))?)?;
    let v = tape.matmul(a, bound.var(&p(l, "attn.wv"))?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let att = tape.causal_softmax(scores)?;
        attention.push(att);
        heads.push(tape.matmul(att, vh)?);
    }
    debug_assert_eq!(tape.value(heads[0]).shape()[0], n);
    let merged = tape.concat_cols(&heads)?;
    let attn_out = tape.matmul(merged, bound.var(&p(l, "attn.wo"))?)?;
    let h = tape.add(h, attn_out)?;
    let f = tape.layer_norm(h, bound.var(&p(l, "ln2.gain"))?, bound.var(&p(l, "ln2.bias"))?, cfg.ln_eps)?;
    let f = tape.matmul(f, bound.var(&p(l, "ff.w1"))?)?;
    let f = tape.add_row_bias(f, bound.var(&p(l, "ff.b1"))?)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, bound.var(&p(l, "ff.w2"))?)?;
    let f = tape.add_row_bias(f, bound.var(&p(l, "ff.b2"))?)?;
    Ok(BlockOut {
        hidden: tape.add(h, f)?,
        attention,
    })
}

/// Causal pre-norm transformer over token vectors `[n×d_model]`.
pub fn forward(tape: &mut Tape, bound: &Bound, cfg: &BackboneConfig, tokens: Var) -> Result<Var> {
    Ok(forward_with_attention(tape, bound, cfg, tokens)?.0)
}

/// Like [`forward`], also returning every attention matrix (layer-major, then head).
pub fn forward_with_attention(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &BackboneConfig,
    tokens: Var,
) -> Result<(Var, Vec<Var>)> {
    let (n, d) = tape.value(tokens).dims2("backbone input")?;
    if n > cfg.max_seq {
        return Err(Error::Contract(format!(
            "sequence of {n} tokens exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    if d != cfg.d_model {
        return Err(Error::shape("backbone", format!("token width {d}, d_model {}", cfg.d_model)));
    }
    let mut h = tokens;
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let out = block(tape, bound, cfg, l, h)?;
        h = out.hidden;
        attention.extend(out.attention);
    }
    let out = tape.layer_norm(h, bound.var("ln_f.gain")?, bound.var("ln_f.bias")?, cfg.ln_eps)?;
    Ok((out, attention))
}

/// Synthetic next-token regression corpus for [`pretrain_stub`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubCorpus {
    pub sequences: usize,
    pub seq_len: usize,
    /// Sinusoidal components mixed into every sequence.
    pub components: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for StubCorpus {
    fn default() -> Self {
        Self {
            sequences: 16,
            seq_len: 32,
            components: 3,
            steps: 30,
            batch: 2,
            lr: 1e-3,
        }
    }
}

const STUB_HEAD: &str = "stub.head.weight";

fn stub_sequences<R: Rng + ?Sized>(corpus: &StubCorpus, d: usize, rng: &mut R) -> Vec<Tensor> {
    let n = corpus.seq_len + 1;
    (0..corpus.sequences)
        .map(|_| {
            let mut data = vec![0.0; n * d];
            let amp = (d as f64 / corpus.components.max(1) as f64).sqrt();
            for _ in 0..corpus.components {
                let dir = Tensor::randn(&[d], 1.0, rng);
                let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let freq = rng.random_range(0.1..1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for t in 0..n {
                    let s = amp * (freq * t as f64 + phase).sin() / norm;
                    for (c, u) in dir.data().iter().enumerate() {
                        data[t * d + c] += s * u;
                    }
                }
            }
            Tensor::matrix(n, d, data).expect("corpus shape")
        })
        .collect()
}

/// Next-step regression loss of one corpus sequence.
fn stub_loss(tape: &mut Tape, bound: &Bound, cfg: &BackboneConfig, seq: &Tensor) -> Result<Var> {
    let (n, d) = seq.dims2("stub sequence")?;
    let mut inputs = seq.data()[..(n - 1) * d].to_vec();
    for (t, row) in inputs.chunks_mut(d).enumerate() {
        for (v, c) in row.iter_mut().zip(embedding::positional_code(t, d)) {
            *v += c;
        }
    }
    let x = tape.constant(Tensor::matrix(n - 1, d, inputs)?);
    let target = tape.constant(Tensor::matrix(n - 1, d, seq.data()[d..].to_vec())?);
    let h = forward(tape, bound, cfg, x)?;
    let pred = tape.matmul(h, bound.var(STUB_HEAD)?)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub params: ParameterStore,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn corpus_loss(store: &ParameterStore, cfg: &BackboneConfig, seqs: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        let mut tape = Tape::new();
        let bound = store.bind_constant(&mut tape);
        let l = stub_loss(&mut tape, &bound, cfg, s)?;
        total += tape.value(l).item()?;
    }
    Ok(total / seqs.len().max(1) as f64)
}

/// Stands in for pre-trained weights: trains the whole model briefly on a
/// synthetic next-token regression corpus, then applies the freeze mask.
pub fn pretrain_stub(
    cfg: &BackboneConfig,
    patch_len: usize,
    repr_dim: usize,
    seed: u64,
    corpus: &StubCorpus,
) -> Result<PretrainReport> {
    cfg.validate(corpus.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = init_model(cfg, patch_len, repr_dim, &mut rng);
    let d = cfg.d_model;
    store.insert(
        STUB_HEAD,
        Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng),
        false,
    );
    let seqs = stub_sequences(corpus, d, &mut rng);
    let initial_loss = corpus_loss(&store, cfg, &seqs)?;
    let mut adam = Adam::new(corpus.lr);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let batch = corpus.batch.max(1);
    let mut cursor = seqs.len();
    for step in 0..corpus.steps {
        for _ in 0..batch {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &seqs[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let loss = stub_loss(&mut tape, &bound, cfg, seq).map_err(|e| stub_diverged(e, step))?;
            let mut grads = tape.backward(loss)?;
            store.accumulate(&bound, &mut grads, 1.0 / batch as f64)?;
        }
        adam.step(&mut store).map_err(|e| stub_diverged(e, step))?;
    }
    let final_loss = corpus_loss(&store, cfg, &seqs)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence(format!("stub pre-training loss {final_loss}")));
    }
    debug!("stub pre-training: loss {initial_loss:.5} -> {final_loss:.5}");
    store.remove(STUB_HEAD);
    store.apply_freeze_mask(is_frozen_name);
    Ok(PretrainReport {
        params: store,
        initial_loss,
        final_loss,
    })
}

fn stub_diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence(format!("stub pre-training: {op} at step {step}")),
        other => other,
    }
}

/// A window ready for the model: time-major tokens and, when the feature
/// term is used, one encoder representation per token (also time-major).
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub tokens: TokenSeries,
    pub reprs: Option<Tensor>,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub windows_per_step: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub params: ParameterStore,
    /// Mean reconstruction MSE of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Reconstruction predictions `[n×patch_len]` for one prepared window.
pub fn reconstruct_window(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &BackboneConfig,
    w: &PreparedWindow,
    terms: EmbeddingTerms,
) -> Result<Var> {
    let tokens = embedding::embed_on_tape(tape, bound, &w.tokens, w.reprs.as_ref(), cfg.d_model, terms)?;
    let hidden = forward(tape, bound, cfg, tokens)?;
    detector::reconstruct(tape, bound, hidden)
}

/// Mean squared reconstruction error of one window, recorded on `tape`.
pub fn window_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &BackboneConfig,
    w: &PreparedWindow,
    terms: EmbeddingTerms,
) -> Result<Var> {
    let recon = reconstruct_window(tape, bound, cfg, w, terms)?;
    let target = tape.constant(Tensor::matrix(w.tokens.len(), w.tokens.patch_len(), w.tokens.value_matrix())?);
    detector::reconstruction_loss(tape, recon, target)
}

/// Fine-tunes the unfrozen tensors on reconstruction of the training windows.
///
/// `on_epoch` runs after every epoch with the current parameters.
pub fn finetune(
    params: ParameterStore,
    windows: &[PreparedWindow],
    cfg: &BackboneConfig,
    terms: EmbeddingTerms,
    opts: &FinetuneOptions,
    mut on_epoch: impl FnMut(usize, &ParameterStore) -> Result<()>,
) -> Result<FinetuneReport> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no training windows for fine-tuning".into()));
    }
    cfg.validate(windows[0].tokens.len())?;
    let mut params = params;
    let frozen_before = params.frozen_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut steps = 0;
    let per_step = opts.windows_per_step.max(1);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for group in order.chunks(per_step) {
            for &i in group {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let loss = window_loss(&mut tape, &bound, cfg, &windows[i], terms)
                    .map_err(|e| finetune_diverged(e, epoch, steps))?;
                total += tape.value(loss).item()?;
                let mut grads = tape.backward(loss)?;
                params.accumulate(&bound, &mut grads, 1.0 / group.len() as f64)?;
            }
            adam.step(&mut params).map_err(|e| finetune_diverged(e, epoch, steps))?;
            steps += 1;
        }
        let mean = total / windows.len() as f64;
        debug!("finetune epoch {epoch}: reconstruction mse {mean:.6}");
        epoch_losses.push(mean);
        on_epoch(epoch, &params)?;
    }
    if params.frozen_digest() != frozen_before {
        return Err(Error::FrozenUpdate("frozen digest changed during fine-tuning".into()));
    }
    Ok(FinetuneReport {
        params,
        epoch_losses,
        steps,
    })
}

fn finetune_diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence(format!(
            "fine-tuning produced a non-finite value in {op} (epoch {epoch}, step {step})"
        )),
        other => other,
    }
}
