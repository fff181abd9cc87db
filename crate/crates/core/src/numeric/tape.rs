//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one record to the [`Tape`] and returns a [`Var`]
//! handle. Records only ever reference earlier records, so the tape is in
//! topological order by construction and [`Tape::backward`] walks it once in
//! reverse. Gradients are only materialized for records that (transitively)
//! depend on a leaf created with `requires_grad = true`; frozen weights are
//! passed as constants and cost nothing on the way back.

use std::f64::consts::PI;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    SumAll(Var),
    MeanAll(Var),
    L2NormRows(Var),
    DivRows(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    Conv1d(ConvMeta),
    MaxPoolTime { x: Var, argmax: Vec<usize> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvMeta {
    input: Var,
    weight: Var,
    dilation: usize,
    batch: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    len: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of every operation of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let inner = k * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    /// `x[..×d] + b[d]`, broadcasting the bias over all leading positions.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = tx.last_dim();
        if tb.numel() != d || tb.ndim() != 1 {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row_bias", out, Op::AddRowBias(x, b), &[x, b])
    }

    /// `x[B×C×T] + b[C]` (or `x[C×T]`), one bias per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, c, t) = conv_dims(tx.shape(), "add_channel_bias")?;
        if tb.shape() != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / t) % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_channel_bias", out, Op::AddChannelBias(x, b), &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("transpose")?;
        let src = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::matrix(c, r, out)?, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `<= i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("causal_softmax")?;
        if r != c {
            return Err(Error::shape("causal_softmax", format!("{r}x{c} is not square")));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut out = vec![0.0; ta.numel()];
        for (r, (src, dst)) in ta.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let visible = if causal { r + 1 } else { d };
            let max = src[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in dst[..visible].iter_mut().zip(&src[..visible]) {
                *o = (v - max).exp();
                total += *o;
            }
            dst[..visible].iter_mut().for_each(|o| *o /= total);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = ta.sum() / ta.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Euclidean norm of every row of a 2-D tensor (or of a vector), shape `[rows]`.
    /// A zero row is a degenerate-vector error.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.last_dim();
        let rows = ta.numel() / d.max(1);
        let mut out = Vec::with_capacity(rows);
        for row in ta.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateVector("l2_norm_rows"));
            }
            out.push(n);
        }
        self.push("l2_norm_rows", Tensor::vector(out), Op::L2NormRows(a), &[a])
    }

    /// Divides row `r` of `x` by `s[r]`.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let d = tx.last_dim();
        let rows = tx.numel() / d.max(1);
        if ts.numel() != rows {
            return Err(Error::shape(
                "div_rows",
                format!("{} divisors for {} rows", ts.numel(), rows),
            ));
        }
        let sd = ts.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / sd[i / d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("div_rows", out, Op::DivRows(x, s), &[x, s])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let out = Tensor::matrix(len, c, tx.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::matrix(r, len, out)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.concat_width(parts, "concat_rows", |r, c| (c, r))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.concat_width(parts, "concat_cols", |r, c| (r, c))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::matrix(r, total, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Checks that all parts share the dimension selected by `pick` and returns it.
    fn concat_width(
        &self,
        parts: &[Var],
        op: &'static str,
        pick: impl Fn(usize, usize) -> (usize, usize),
    ) -> Result<usize> {
        let mut shared = None;
        for &p in parts {
            let (r, c) = self.value(p).dims2(op)?;
            let (keep, _) = pick(r, c);
            match shared {
                None => shared = Some(keep),
                Some(s) if s != keep => {
                    return Err(Error::shape(op, format!("mismatched widths {s} and {keep}")))
                }
                _ => {}
            }
        }
        shared.ok_or_else(|| Error::shape(op, "nothing to concatenate"))
    }

    /// Embedding lookup: rows `idx` of a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::shape("gather_rows", format!("index {i} out of {v} rows")));
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::matrix(idx.len(), d, data)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `input` is `[B×C_in×T]` (or `[C_in×T]`), `weight` is `[C_out×C_in×K]`.
    /// Tap `k` looks back `k·dilation` steps:
    /// `out[b,o,t] = Σ_c Σ_k w[o,c,k] · x[b,c,t − k·dilation]`, with zeros
    /// before the start of the sequence (left padding of `(K−1)·dilation`).
    pub fn conv1d_causal(&mut self, input: Var, weight: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::Parameter("conv1d dilation must be positive".into()));
        }
        let (tx, tw) = (self.value(input), self.value(weight));
        let (batch, cin, len) = conv_dims(tx.shape(), "conv1d_causal")?;
        let (cout, cin_w, kernel) = match tw.shape() {
            [o, i, k] => (*o, *i, *k),
            other => {
                return Err(Error::shape(
                    "conv1d_causal",
                    format!("weight must be [C_out×C_in×K], got {other:?}"),
                ))
            }
        };
        if cin_w != cin || kernel == 0 {
            return Err(Error::shape(
                "conv1d_causal",
                format!("weight {:?} for input {:?}", tw.shape(), tx.shape()),
            ));
        }
        let (x, w) = (tx.data(), tw.data());
        let mut out = vec![0.0; batch * cout * len];
        for b in 0..batch {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * len..(b * cout + o + 1) * len];
                for c in 0..cin {
                    let src = &x[(b * cin + c) * len..(b * cin + c + 1) * len];
                    for k in 0..kernel {
                        let wv = w[(o * cin + c) * kernel + k];
                        let lag = k * dilation;
                        if lag >= len || wv == 0.0 {
                            continue;
                        }
                        for (d, s) in dst[lag..].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        let ch = shape.len() - 2;
        shape[ch] = cout;
        let meta = ConvMeta {
            input,
            weight,
            dilation,
            batch,
            cin,
            cout,
            kernel,
            len,
        };
        self.push("conv1d_causal", Tensor::new(shape, out)?, Op::Conv1d(meta), &[input, weight])
    }

    /// Global max over the last (time) axis: `[B×C×T] -> [B×C]`, `[C×T] -> [C]`.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() < 2 {
            return Err(Error::shape("max_pool_time", format!("{:?}", tx.shape())));
        }
        let t = tx.last_dim();
        if t == 0 {
            return Err(Error::shape("max_pool_time", "empty time axis"));
        }
        let mut vals = Vec::with_capacity(tx.numel() / t);
        let mut argmax = Vec::with_capacity(tx.numel() / t);
        for (r, row) in tx.data().chunks(t).enumerate() {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            vals.push(row[best]);
            argmax.push(r * t + best);
        }
        let shape = tx.shape()[..tx.ndim() - 1].to_vec();
        self.push(
            "max_pool_time",
            Tensor::new(shape, vals)?,
            Op::MaxPoolTime { x, argmax },
            &[x],
        )
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?}, bias {:?} for width {d}", tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.numel() / d.max(1);
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; tx.numel()];
        let (g, bb) = (tg.data(), tb.data());
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Computes gradients of the scalar `loss` with respect to every leaf
    /// created with `requires_grad`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: (0..nodes.len()).map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            acc.propagate(node, &g)?;
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn conv_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, t] => Ok((1, *c, *t)),
        [b, c, t] => Ok((*b, *c, *t)),
        other => Err(Error::shape(op, format!("expected [B×C×T] or [C×T], got {other:?}"))),
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    /// Mutable gradient buffer for `var`, or `None` when it needs no gradient.
    fn buf(&mut self, var: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[var.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn propagate(&mut self, node: &Node, g: &[f64]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.buf(v) {
                        buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.buf(*a) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(buf) = self.buf(*b) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data().to_vec(), self.val(*b).data().to_vec());
                if let Some(buf) = self.buf(*a) {
                    for i in 0..g.len() {
                        buf[i] += g[i] * vb[i];
                    }
                }
                if let Some(buf) = self.buf(*b) {
                    for i in 0..g.len() {
                        buf[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a).data().to_vec(), self.val(*b).data().to_vec());
                if let Some(buf) = self.buf(*a) {
                    for i in 0..g.len() {
                        buf[i] += g[i] / vb[i];
                    }
                }
                if let Some(buf) = self.buf(*b) {
                    for i in 0..g.len() {
                        buf[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(buf) = self.buf(*a) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(buf) = self.buf(*x) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(buf) = self.buf(*b) {
                    let d = buf.len();
                    for (i, s) in g.iter().enumerate() {
                        buf[i % d] += s;
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                let t = self.val(*x).last_dim();
                if let Some(buf) = self.buf(*x) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(buf) = self.buf(*b) {
                    let c = buf.len();
                    for (i, s) in g.iter().enumerate() {
                        buf[(i / t) % c] += s;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2("matmul")?;
                let n = self.val(*b).shape()[1];
                let bd = self.val(*b).data().to_vec();
                let ad = if self.nodes[b.0].requires_grad {
                    Some(self.val(*a).data().to_vec())
                } else {
                    None
                };
                if let Some(buf) = self.buf(*a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n as isize, 1), &bd, (1, n as isize), 1.0, buf);
                }
                if let (Some(ad), Some(buf)) = (ad, self.buf(*b)) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, &ad, (1, k as isize), g, (n as isize, 1), 1.0, buf);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.val(*a).dims2("transpose")?;
                if let Some(buf) = self.buf(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(buf) = self.buf(*a) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Gelu(a) => {
                let va = self.val(*a).data().to_vec();
                if let Some(buf) = self.buf(*a) {
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(va[i]);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.val(*a).data().to_vec();
                if let Some(buf) = self.buf(*a) {
                    for i in 0..g.len() {
                        buf[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                if let Some(buf) = self.buf(*a) {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let va = self.val(*a).data().to_vec();
                if let Some(buf) = self.buf(*a) {
                    for i in 0..g.len() {
                        buf[i] += g[i] / va[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(buf) = self.buf(*a) {
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(buf) = self.buf(*a) {
                    buf.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(buf) = self.buf(*a) {
                    let s = g[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::L2NormRows(a) => {
                let va = self.val(*a).data().to_vec();
                let d = self.val(*a).last_dim();
                let norms = node.value.data();
                if let Some(buf) = self.buf(*a) {
                    for (i, v) in va.iter().enumerate() {
                        buf[i] += g[i / d] * v / norms[i / d];
                    }
                }
            }
            Op::DivRows(x, s) => {
                let vx = self.val(*x).data().to_vec();
                let vs = self.val(*s).data().to_vec();
                let d = self.val(*x).last_dim();
                if let Some(buf) = self.buf(*x) {
                    for i in 0..g.len() {
                        buf[i] += g[i] / vs[i / d];
                    }
                }
                if let Some(buf) = self.buf(*s) {
                    for i in 0..g.len() {
                        let r = i / d;
                        buf[r] -= g[i] * vx[i] / (vs[r] * vs[r]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.val(*x).shape()[1];
                if let Some(buf) = self.buf(*x) {
                    let off = start * c;
                    buf[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.val(*x).shape()[1];
                let w = node.value.shape()[1];
                if let Some(buf) = self.buf(*x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            buf[r * c + start + j] += gr[j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    if let Some(buf) = self.buf(p) {
                        buf.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, s)| *d += s);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.val(p).dims2("concat_cols")?;
                    if let Some(buf) = self.buf(p) {
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.val(*table).shape()[1];
                if let Some(buf) = self.buf(*table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Conv1d(m) => self.conv_backward(m, g),
            Op::MaxPoolTime { x, argmax } => {
                if let Some(buf) = self.buf(*x) {
                    for (s, &i) in g.iter().zip(argmax) {
                        buf[i] += s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.val(*gain).data().to_vec();
                if let Some(buf) = self.buf(*bias) {
                    for (i, s) in g.iter().enumerate() {
                        buf[i % d] += s;
                    }
                }
                if let Some(buf) = self.buf(*gain) {
                    for (i, s) in g.iter().enumerate() {
                        buf[i % d] += s * xhat[i];
                    }
                }
                if let Some(buf) = self.buf(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[base + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[base + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            buf[base + j] += rs * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv_backward(&mut self, m: &ConvMeta, g: &[f64]) {
        let ConvMeta {
            input,
            weight,
            dilation,
            batch,
            cin,
            cout,
            kernel,
            len,
        } = *m;
        let w = self.val(weight).data().to_vec();
        let x = if self.nodes[weight.0].requires_grad {
            Some(self.val(input).data().to_vec())
        } else {
            None
        };
        if let Some(buf) = self.buf(input) {
            for b in 0..batch {
                for o in 0..cout {
                    let gy = &g[(b * cout + o) * len..(b * cout + o + 1) * len];
                    for c in 0..cin {
                        let dx = &mut buf[(b * cin + c) * len..(b * cin + c + 1) * len];
                        for k in 0..kernel {
                            let lag = k * dilation;
                            if lag >= len {
                                continue;
                            }
                            let wv = w[(o * cin + c) * kernel + k];
                            for (d, s) in dx.iter_mut().zip(&gy[lag..]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        if let (Some(x), Some(buf)) = (x, self.buf(weight)) {
            for b in 0..batch {
                for o in 0..cout {
                    let gy = &g[(b * cout + o) * len..(b * cout + o + 1) * len];
                    for c in 0..cin {
                        let xs = &x[(b * cin + c) * len..(b * cin + c + 1) * len];
                        for k in 0..kernel {
                            let lag = k * dilation;
                            if lag >= len {
                                continue;
                            }
                            let s: f64 = gy[lag..].iter().zip(xs).map(|(p, q)| p * q).sum();
                            buf[(o * cin + c) * kernel + k] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2("t").unwrap();
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let y = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul(va, vb).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(naive_matmul(&a, &b)) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 5], vec![0.3, -1.0, 2.0, 0.0, 4.5]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d_causal(x, w, 3).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_lag_tap_shifts_right() {
        // out[t] = w0·x[t] + w1·x[t−1] with w = [0, 1]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = tape.conv1d_causal(x, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_rejects_zero_dilation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(matches!(tape.conv1d_causal(x, w, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::filled(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::vector(vec![3.0, 3.0]));
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        for (got, want) in tape.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((got - want).abs() < 1e-9);
        }

        let gain0 = tape.constant(Tensor::zeros(&[2]));
        let bias = tape.constant(Tensor::filled(&[2], 2.5));
        let y = tape.layer_norm(x, gain0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 2.5]);
        assert!(tape.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -2.0, 3.0]), true);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let dot = tape.sum(sq).unwrap();
        let grads = tape.backward(dot).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
        let z = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.log(z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[3, 3], 0.0));
        let y = tape.causal_softmax(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
        );
    }

    #[test]
    fn zero_norm_row_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        assert!(matches!(tape.l2_norm_rows(x), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::filled(&[2, 2], 1.0));
        let x = tape.leaf(Tensor::filled(&[1, 2], 1.0), true);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
