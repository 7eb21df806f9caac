//! Forward and vector-Jacobian kernels.
//!
//! Every kernel takes its inputs as borrowed tensors and returns the output
//! together with whatever it needs to keep for the backward pass. Backward
//! functions receive the upstream gradient and return one optional gradient
//! per input (skipped when the input does not need one).

use std::str::FromStr;

use crate::error::{GradError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel identifier without attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Matmul,
    Add,
    Mul,
    Relu,
    Tanh,
    Softmax,
    LogSoftmax,
    LayerNorm,
    EmbeddingLookup,
    Conv2d,
    MaxPool2d,
    GlobalAvgPool,
    MeanReduce,
    SumReduce,
    Concat,
    SliceView,
    Reshape,
    ScaledDotAttention,
    CrossEntropy,
    Mse,
}

impl KernelKind {
    pub const ALL: [KernelKind; 20] = [
        KernelKind::Matmul,
        KernelKind::Add,
        KernelKind::Mul,
        KernelKind::Relu,
        KernelKind::Tanh,
        KernelKind::Softmax,
        KernelKind::LogSoftmax,
        KernelKind::LayerNorm,
        KernelKind::EmbeddingLookup,
        KernelKind::Conv2d,
        KernelKind::MaxPool2d,
        KernelKind::GlobalAvgPool,
        KernelKind::MeanReduce,
        KernelKind::SumReduce,
        KernelKind::Concat,
        KernelKind::SliceView,
        KernelKind::Reshape,
        KernelKind::ScaledDotAttention,
        KernelKind::CrossEntropy,
        KernelKind::Mse,
    ];

    pub fn id(self) -> &'static str {
        match self {
            KernelKind::Matmul => "matmul",
            KernelKind::Add => "add",
            KernelKind::Mul => "mul",
            KernelKind::Relu => "relu",
            KernelKind::Tanh => "tanh",
            KernelKind::Softmax => "softmax",
            KernelKind::LogSoftmax => "log_softmax",
            KernelKind::LayerNorm => "layernorm",
            KernelKind::EmbeddingLookup => "embedding_lookup",
            KernelKind::Conv2d => "conv2d",
            KernelKind::MaxPool2d => "maxpool2d",
            KernelKind::GlobalAvgPool => "global_avg_pool",
            KernelKind::MeanReduce => "mean_reduce",
            KernelKind::SumReduce => "sum_reduce",
            KernelKind::Concat => "concat",
            KernelKind::SliceView => "slice_view",
            KernelKind::Reshape => "reshape",
            KernelKind::ScaledDotAttention => "scaled_dot_attention",
            KernelKind::CrossEntropy => "cross_entropy",
            KernelKind::Mse => "mse",
        }
    }
}

impl FromStr for KernelKind {
    type Err = GradError;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| GradError::UnknownKernel(s.to_string()))
    }
}

/// A kernel together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// `op(a)·op(b)` on rank-2 inputs, `op` optionally transposing.
    Matmul { trans_a: bool, trans_b: bool },
    /// Elementwise sum; the second input may also be a rank-1 bias matching
    /// the trailing dimension of the first.
    Add,
    Mul,
    Relu,
    Tanh,
    /// Row-wise over the last axis.
    Softmax,
    LogSoftmax,
    /// Inputs `[x, gamma, beta]`, normalizing over the last axis.
    LayerNorm { eps: f64 },
    /// Input `[table]` of shape `[vocab, dim]`.
    EmbeddingLookup { ids: Vec<usize> },
    /// Inputs `[x, weight]` or `[x, weight, bias]`; NCHW / OIHW layout.
    Conv2d { stride: usize, padding: usize },
    /// Window `k`, stride `k`, floor semantics.
    MaxPool2d { k: usize },
    GlobalAvgPool,
    MeanReduce,
    SumReduce,
    /// Along axis 0.
    Concat,
    /// Rows `[start, end)` along axis 0.
    SliceView { start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    /// Inputs `[q, k, v]`, each `[len, d_model]`.
    ScaledDotAttention { n_heads: usize, causal: bool },
    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    CrossEntropy { labels: Vec<usize> },
    /// Mean squared difference of two equally shaped inputs.
    Mse,
}

impl Kernel {
    pub fn kind(&self) -> KernelKind {
        match self {
            Kernel::Matmul { .. } => KernelKind::Matmul,
            Kernel::Add => KernelKind::Add,
            Kernel::Mul => KernelKind::Mul,
            Kernel::Relu => KernelKind::Relu,
            Kernel::Tanh => KernelKind::Tanh,
            Kernel::Softmax => KernelKind::Softmax,
            Kernel::LogSoftmax => KernelKind::LogSoftmax,
            Kernel::LayerNorm { .. } => KernelKind::LayerNorm,
            Kernel::EmbeddingLookup { .. } => KernelKind::EmbeddingLookup,
            Kernel::Conv2d { .. } => KernelKind::Conv2d,
            Kernel::MaxPool2d { .. } => KernelKind::MaxPool2d,
            Kernel::GlobalAvgPool => KernelKind::GlobalAvgPool,
            Kernel::MeanReduce => KernelKind::MeanReduce,
            Kernel::SumReduce => KernelKind::SumReduce,
            Kernel::Concat => KernelKind::Concat,
            Kernel::SliceView { .. } => KernelKind::SliceView,
            Kernel::Reshape { .. } => KernelKind::Reshape,
            Kernel::ScaledDotAttention { .. } => KernelKind::ScaledDotAttention,
            Kernel::CrossEntropy { .. } => KernelKind::CrossEntropy,
            Kernel::Mse => KernelKind::Mse,
        }
    }
}

/// Values a kernel keeps between forward and backward.
#[derive(Debug, Clone)]
pub(crate) enum Saved<T> {
    None,
    /// Row-wise softmax probabilities.
    Probs(Vec<T>),
    /// Normalized input and reciprocal standard deviation per row.
    Norm { xhat: Vec<T>, rstd: Vec<T> },
    /// Flat input index of each pooled maximum.
    Argmax(Vec<usize>),
    /// Attention probabilities, `[heads, len, len]`.
    Attention(Vec<T>),
}

fn mismatch<T>(kind: KernelKind, inputs: &[&Tensor<T>]) -> GradError
where
    T: Scalar,
{
    GradError::ShapeMismatch {
        kind,
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn expect_arity<T: Scalar>(kind: KernelKind, inputs: &[&Tensor<T>], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(GradError::InvalidAttr {
            kind,
            reason: format!("expected {allowed:?} inputs, got {}", inputs.len()),
        })
    }
}

/// Row-major strides of `op(x)` for a rank-2 tensor stored as `[r, c]`.
fn op_view(rows: usize, cols: usize, trans: bool) -> (usize, usize, isize, isize) {
    if trans {
        (cols, rows, 1, cols as isize)
    } else {
        (rows, cols, cols as isize, 1)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one image into `[cin*kh*kw, ho*wo]` columns.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            dst[oi * wo + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.h
                                && (jj as usize) < self.w
                            {
                                x[(c * self.h + ii as usize) * self.w + jj as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Accumulate column gradients back onto one image.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + ii as usize) * self.w + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(
    inputs: &[&Tensor<T>],
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let kind = KernelKind::Conv2d;
    expect_arity(kind, inputs, &[2, 3])?;
    let (x, w) = (inputs[0].shape(), inputs[1].shape());
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(mismatch(kind, inputs));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w[0]] {
            return Err(mismatch(kind, inputs));
        }
    }
    if stride == 0 {
        return Err(GradError::InvalidAttr {
            kind,
            reason: "stride must be positive".into(),
        });
    }
    let ho = conv_out(x[2], w[2], stride, padding).ok_or_else(|| mismatch(kind, inputs))?;
    let wo = conv_out(x[3], w[3], stride, padding).ok_or_else(|| mismatch(kind, inputs))?;
    Ok(ConvGeom {
        batch: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: w[0],
        kh: w[2],
        kw: w[3],
        ho,
        wo,
        stride,
        padding,
    })
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

fn log_softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
        for (d, &s) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

pub(crate) fn forward<T: Scalar>(kernel: &Kernel, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    let kind = kernel.kind();
    match kernel {
        Kernel::Matmul { trans_a, trans_b } => {
            expect_arity(kind, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(mismatch(kind, inputs));
            }
            let (m, ka, rsa, csa) = op_view(a.shape()[0], a.shape()[1], *trans_a);
            let (kb, n, rsb, csb) = op_view(b.shape()[0], b.shape()[1], *trans_b);
            if ka != kb {
                return Err(mismatch(kind, inputs));
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, ka, n, T::one(), a.data(), rsa, csa, b.data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
            Ok((Tensor::from_parts(vec![m, n], out), Saved::None))
        }
        Kernel::Add => {
            expect_arity(kind, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
            } else if b.shape().len() == 1 && a.shape().last() == Some(&b.shape()[0]) && !a.shape().is_empty() {
                let d = b.len();
                let out = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + b.data()[i % d])
                    .collect();
                Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
            } else {
                Err(mismatch(kind, inputs))
            }
        }
        Kernel::Mul => {
            expect_arity(kind, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(kind, inputs));
            }
            let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        Kernel::Relu | Kernel::Tanh => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            let out = if matches!(kernel, Kernel::Relu) {
                x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
            } else {
                x.data().iter().map(|&v| v.tanh()).collect()
            };
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::None))
        }
        Kernel::Softmax | Kernel::LogSoftmax => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if x.shape().is_empty() {
                return Err(mismatch(kind, inputs));
            }
            let (rows, cols) = rows_of(x.shape());
            let probs = softmax_rows(x.data(), rows, cols);
            let out = if matches!(kernel, Kernel::Softmax) {
                probs.clone()
            } else {
                log_softmax_rows(x.data(), rows, cols)
            };
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::Probs(probs)))
        }
        Kernel::LayerNorm { eps } => {
            expect_arity(kind, inputs, &[3])?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (rows, cols) = rows_of(x.shape());
            if x.shape().is_empty() || gamma.shape() != [cols] || beta.shape() != [cols] {
                return Err(mismatch(kind, inputs));
            }
            let eps = T::from_f64_lossy(*eps);
            let n = T::from_usize(cols).unwrap();
            let mut xhat = vec![T::zero(); x.len()];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); x.len()];
            for r in 0..rows {
                let src = &x.data()[r * cols..(r + 1) * cols];
                let mean = src.iter().copied().sum::<T>() / n;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..cols {
                    let h = (src[j] - mean) * rs;
                    xhat[r * cols + j] = h;
                    out[r * cols + j] = h * gamma.data()[j] + beta.data()[j];
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::Norm { xhat, rstd }))
        }
        Kernel::EmbeddingLookup { ids } => {
            expect_arity(kind, inputs, &[1])?;
            let table = inputs[0];
            if table.shape().len() != 2 {
                return Err(mismatch(kind, inputs));
            }
            let (vocab, dim) = (table.shape()[0], table.shape()[1]);
            if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
                return Err(GradError::InvalidAttr {
                    kind,
                    reason: format!("token id {bad} outside vocabulary of {vocab}"),
                });
            }
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &i in ids {
                out.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]);
            }
            Ok((Tensor::from_parts(vec![ids.len(), dim], out), Saved::None))
        }
        Kernel::Conv2d { stride, padding } => {
            let g = conv_geom(inputs, *stride, *padding)?;
            let (x, w) = (inputs[0], inputs[1]);
            let (pl, ol) = (g.patch_len(), g.out_len());
            let mut out = vec![T::zero(); g.batch * g.cout * ol];
            let mut cols = vec![T::zero(); pl * ol];
            let img = g.cin * g.h * g.w;
            for b in 0..g.batch {
                g.im2col(&x.data()[b * img..(b + 1) * img], &mut cols);
                let dst = &mut out[b * g.cout * ol..(b + 1) * g.cout * ol];
                if let Some(bias) = inputs.get(2) {
                    for (o, chunk) in dst.chunks_mut(ol).enumerate() {
                        chunk.fill(bias.data()[o]);
                    }
                }
                let beta = if inputs.len() == 3 { T::one() } else { T::zero() };
                T::gemm(g.cout, pl, ol, T::one(), w.data(), pl as isize, 1, &cols, ol as isize, 1, beta, dst, ol as isize, 1);
            }
            Ok((Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out), Saved::None))
        }
        Kernel::MaxPool2d { k } => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            let s = x.shape();
            if s.len() != 4 || *k == 0 || s[2] < *k || s[3] < *k {
                return Err(mismatch(kind, inputs));
            }
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h / k, w / k);
            let mut out = Vec::with_capacity(bc * ho * wo);
            let mut arg = Vec::with_capacity(bc * ho * wo);
            for p in 0..bc {
                let base = p * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = base + oi * k * w + oj * k;
                        for di in 0..*k {
                            for dj in 0..*k {
                                let idx = base + (oi * k + di) * w + oj * k + dj;
                                // strict comparison keeps the first maximum in scan order
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x.data()[best]);
                        arg.push(best);
                    }
                }
            }
            Ok((Tensor::from_parts(vec![s[0], s[1], ho, wo], out), Saved::Argmax(arg)))
        }
        Kernel::GlobalAvgPool => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            let s = x.shape();
            if s.len() != 4 || s[2] * s[3] == 0 {
                return Err(mismatch(kind, inputs));
            }
            let area = s[2] * s[3];
            let inv = T::one() / T::from_usize(area).unwrap();
            let out = x.data().chunks(area).map(|c| c.iter().copied().sum::<T>() * inv).collect();
            Ok((Tensor::from_parts(vec![s[0], s[1]], out), Saved::None))
        }
        Kernel::MeanReduce | Kernel::SumReduce => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if x.is_empty() {
                return Err(mismatch(kind, inputs));
            }
            let mut total = x.data().iter().copied().sum::<T>();
            if matches!(kernel, Kernel::MeanReduce) {
                total /= T::from_usize(x.len()).unwrap();
            }
            Ok((Tensor::scalar(total), Saved::None))
        }
        Kernel::Concat => {
            if inputs.is_empty() {
                return Err(mismatch(kind, inputs));
            }
            let tail = &inputs[0].shape().get(1..).ok_or_else(|| mismatch(kind, inputs))?;
            let mut rows = 0;
            for t in inputs {
                if t.shape().is_empty() || &t.shape()[1..] != *tail {
                    return Err(mismatch(kind, inputs));
                }
                rows += t.shape()[0];
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            let mut out = Vec::with_capacity(shape.iter().product());
            for t in inputs {
                out.extend_from_slice(t.data());
            }
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        Kernel::SliceView { start, end } => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if x.shape().is_empty() || start > end || *end > x.shape()[0] {
                return Err(GradError::InvalidAttr {
                    kind,
                    reason: format!("rows {start}..{end} outside shape {:?}", x.shape()),
                });
            }
            let row: usize = x.shape()[1..].iter().product();
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let out = x.data()[start * row..end * row].to_vec();
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        Kernel::Reshape { shape } => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.len() {
                return Err(GradError::InvalidAttr {
                    kind,
                    reason: format!("cannot view {:?} as {shape:?}", x.shape()),
                });
            }
            Ok((Tensor::from_parts(shape.clone(), x.data().to_vec()), Saved::None))
        }
        Kernel::ScaledDotAttention { n_heads, causal } => {
            expect_arity(kind, inputs, &[3])?;
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
                return Err(mismatch(kind, inputs));
            }
            let (len, d) = (q.shape()[0], q.shape()[1]);
            if *n_heads == 0 || d % n_heads != 0 {
                return Err(GradError::InvalidAttr {
                    kind,
                    reason: format!("width {d} not divisible into {n_heads} heads"),
                });
            }
            let dh = d / n_heads;
            let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
            let mut probs = vec![T::zero(); n_heads * len * len];
            let mut out = vec![T::zero(); len * d];
            for h in 0..*n_heads {
                let p = &mut probs[h * len * len..(h + 1) * len * len];
                let off = h * dh;
                T::gemm(len, dh, len, scale, &q.data()[off..], d as isize, 1, &k.data()[off..], 1, d as isize, T::zero(), p, len as isize, 1);
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let visible = if *causal { i + 1 } else { len };
                    let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in row[..visible].iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in row[..visible].iter_mut() {
                        *s /= sum;
                    }
                    row[visible..].fill(T::zero());
                }
                T::gemm(len, len, dh, T::one(), p, len as isize, 1, &v.data()[off..], d as isize, 1, T::zero(), &mut out[off..], d as isize, 1);
            }
            Ok((Tensor::from_parts(vec![len, d], out), Saved::Attention(probs)))
        }
        Kernel::CrossEntropy { labels } => {
            expect_arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if x.shape().len() != 2 || x.shape()[0] != labels.len() || labels.is_empty() {
                return Err(mismatch(kind, inputs));
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
                return Err(GradError::InvalidAttr {
                    kind,
                    reason: format!("label {bad} outside {cols} classes"),
                });
            }
            let logp = log_softmax_rows(x.data(), rows, cols);
            let nll = labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -logp[r * cols + l])
                .sum::<T>()
                / T::from_usize(rows).unwrap();
            let probs = logp.iter().map(|v| v.exp()).collect();
            Ok((Tensor::scalar(nll), Saved::Probs(probs)))
        }
        Kernel::Mse => {
            expect_arity(kind, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() || a.is_empty() {
                return Err(mismatch(kind, inputs));
            }
            let sq = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>();
            Ok((Tensor::scalar(sq / T::from_usize(a.len()).unwrap()), Saved::None))
        }
    }
}

/// Vector-Jacobian product. `needs[i]` says whether input `i` wants a
/// gradient; the returned vector has one entry per input.
pub(crate) fn backward<T: Scalar>(
    kernel: &Kernel,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let g = grad.data();
    let like = |t: &Tensor<T>, data: Vec<T>| Some(Tensor::from_parts(t.shape().to_vec(), data));
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    match kernel {
        Kernel::Matmul { trans_a, trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, rsa, csa) = op_view(a.shape()[0], a.shape()[1], *trans_a);
            let (_, n, rsb, csb) = op_view(b.shape()[0], b.shape()[1], *trans_b);
            let ni = n as isize;
            if needs[0] {
                let mut da = vec![T::zero(); a.len()];
                if !trans_a {
                    // dA = dC · op(B)^T
                    T::gemm(m, n, k, T::one(), g, ni, 1, b.data(), csb, rsb, T::zero(), &mut da, k as isize, 1);
                } else {
                    // A stored [k, m]: dA = op(B) · dC^T
                    T::gemm(k, n, m, T::one(), b.data(), rsb, csb, g, 1, ni, T::zero(), &mut da, m as isize, 1);
                }
                grads[0] = like(a, da);
            }
            if needs[1] {
                let mut db = vec![T::zero(); b.len()];
                if !trans_b {
                    // dB = op(A)^T · dC
                    T::gemm(k, m, n, T::one(), a.data(), csa, rsa, g, ni, 1, T::zero(), &mut db, ni, 1);
                } else {
                    // B stored [n, k]: dB = dC^T · op(A)
                    T::gemm(n, m, k, T::one(), g, 1, ni, a.data(), rsa, csa, T::zero(), &mut db, k as isize, 1);
                }
                grads[1] = like(b, db);
            }
        }
        Kernel::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                grads[0] = like(a, g.to_vec());
            }
            if needs[1] {
                if a.shape() == b.shape() {
                    grads[1] = like(b, g.to_vec());
                } else {
                    let d = b.len();
                    let mut db = vec![T::zero(); d];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % d] += v;
                    }
                    grads[1] = like(b, db);
                }
            }
        }
        Kernel::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                grads[0] = like(a, g.iter().zip(b.data()).map(|(&u, &y)| u * y).collect());
            }
            if needs[1] {
                grads[1] = like(b, g.iter().zip(a.data()).map(|(&u, &x)| u * x).collect());
            }
        }
        Kernel::Relu => {
            let x = inputs[0];
            grads[0] = like(
                x,
                g.iter()
                    .zip(x.data())
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect(),
            );
        }
        Kernel::Tanh => {
            grads[0] = like(
                inputs[0],
                g.iter()
                    .zip(output.data())
                    .map(|(&u, &y)| u * (T::one() - y * y))
                    .collect(),
            );
        }
        Kernel::Softmax => {
            let (rows, cols) = rows_of(output.shape());
            let y = output.data();
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                let dot = g[s.clone()].iter().zip(&y[s.clone()]).map(|(&u, &p)| u * p).sum::<T>();
                for j in s {
                    dx[j] = y[j] * (g[j] - dot);
                }
            }
            grads[0] = like(inputs[0], dx);
        }
        Kernel::LogSoftmax => {
            let Saved::Probs(p) = saved else { unreachable!("log_softmax saves probabilities") };
            let (rows, cols) = rows_of(output.shape());
            let mut dx = vec![T::zero(); p.len()];
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                let total = g[s.clone()].iter().copied().sum::<T>();
                for j in s {
                    dx[j] = g[j] - p[j] * total;
                }
            }
            grads[0] = like(inputs[0], dx);
        }
        Kernel::LayerNorm { .. } => {
            let Saved::Norm { xhat, rstd } = saved else { unreachable!("layernorm saves statistics") };
            let (x, gamma) = (inputs[0], inputs[1]);
            let (rows, cols) = rows_of(x.shape());
            let n = T::from_usize(cols).unwrap();
            if needs[0] {
                let mut dx = vec![T::zero(); x.len()];
                for r in 0..rows {
                    let s = r * cols;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..cols {
                        let d = g[s + j] * gamma.data()[j];
                        sum_d += d;
                        sum_dx += d * xhat[s + j];
                    }
                    for j in 0..cols {
                        let d = g[s + j] * gamma.data()[j];
                        dx[s + j] = rstd[r] / n * (n * d - sum_d - xhat[s + j] * sum_dx);
                    }
                }
                grads[0] = like(x, dx);
            }
            if needs[1] || needs[2] {
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    for j in 0..cols {
                        dg[j] += g[r * cols + j] * xhat[r * cols + j];
                        db[j] += g[r * cols + j];
                    }
                }
                if needs[1] {
                    grads[1] = like(inputs[1], dg);
                }
                if needs[2] {
                    grads[2] = like(inputs[2], db);
                }
            }
        }
        Kernel::EmbeddingLookup { ids } => {
            let table = inputs[0];
            let dim = table.shape()[1];
            let mut dt = vec![T::zero(); table.len()];
            for (row, &i) in ids.iter().enumerate() {
                for j in 0..dim {
                    dt[i * dim + j] += g[row * dim + j];
                }
            }
            grads[0] = like(table, dt);
        }
        Kernel::Conv2d { stride, padding } => {
            let geom = conv_geom(inputs, *stride, *padding).expect("validated in forward");
            let (x, w) = (inputs[0], inputs[1]);
            let (pl, ol) = (geom.patch_len(), geom.out_len());
            let img = geom.cin * geom.h * geom.w;
            let mut cols = vec![T::zero(); pl * ol];
            let mut dcols = vec![T::zero(); pl * ol];
            let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
            let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
            for b in 0..geom.batch {
                let gb = &g[b * geom.cout * ol..(b + 1) * geom.cout * ol];
                if let Some(dw) = dw.as_mut() {
                    geom.im2col(&x.data()[b * img..(b + 1) * img], &mut cols);
                    T::gemm(geom.cout, ol, pl, T::one(), gb, ol as isize, 1, &cols, 1, ol as isize, T::one(), dw, pl as isize, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(pl, geom.cout, ol, T::one(), w.data(), 1, pl as isize, gb, ol as isize, 1, T::zero(), &mut dcols, ol as isize, 1);
                    geom.col2im(&dcols, &mut dx[b * img..(b + 1) * img]);
                }
            }
            grads[0] = dx.and_then(|d| like(x, d));
            grads[1] = dw.and_then(|d| like(w, d));
            if inputs.len() == 3 && needs[2] {
                let mut db = vec![T::zero(); geom.cout];
                for (i, chunk) in g.chunks(ol).enumerate() {
                    db[i % geom.cout] += chunk.iter().copied().sum::<T>();
                }
                grads[2] = like(inputs[2], db);
            }
        }
        Kernel::MaxPool2d { .. } => {
            let Saved::Argmax(arg) = saved else { unreachable!("maxpool saves argmax") };
            let mut dx = vec![T::zero(); inputs[0].len()];
            for (&i, &u) in arg.iter().zip(g) {
                dx[i] += u;
            }
            grads[0] = like(inputs[0], dx);
        }
        Kernel::GlobalAvgPool => {
            let x = inputs[0];
            let area = x.shape()[2] * x.shape()[3];
            let inv = T::one() / T::from_usize(area).unwrap();
            let dx = (0..x.len()).map(|i| g[i / area] * inv).collect();
            grads[0] = like(x, dx);
        }
        Kernel::MeanReduce | Kernel::SumReduce => {
            let x = inputs[0];
            let mut u = g[0];
            if matches!(kernel, Kernel::MeanReduce) {
                u /= T::from_usize(x.len()).unwrap();
            }
            grads[0] = like(x, vec![u; x.len()]);
        }
        Kernel::Concat => {
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                if needs[i] {
                    grads[i] = like(t, g[offset..offset + t.len()].to_vec());
                }
                offset += t.len();
            }
        }
        Kernel::SliceView { start, end } => {
            let x = inputs[0];
            let row: usize = x.shape()[1..].iter().product();
            let mut dx = vec![T::zero(); x.len()];
            dx[start * row..end * row].copy_from_slice(g);
            grads[0] = like(x, dx);
        }
        Kernel::Reshape { .. } => {
            grads[0] = like(inputs[0], g.to_vec());
        }
        Kernel::ScaledDotAttention { n_heads, .. } => {
            let Saved::Attention(probs) = saved else { unreachable!("attention saves probabilities") };
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            let (len, d) = (q.shape()[0], q.shape()[1]);
            let dh = d / n_heads;
            let di = d as isize;
            let li = len as isize;
            let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
            let mut dq = vec![T::zero(); q.len()];
            let mut dk = vec![T::zero(); k.len()];
            let mut dv = vec![T::zero(); v.len()];
            let mut dp = vec![T::zero(); len * len];
            for h in 0..*n_heads {
                let p = &probs[h * len * len..(h + 1) * len * len];
                let off = h * dh;
                let go = &g[off..];
                // dV = P^T · dO
                T::gemm(len, len, dh, T::one(), p, 1, li, go, di, 1, T::zero(), &mut dv[off..], di, 1);
                // dP = dO · V^T
                T::gemm(len, dh, len, T::one(), go, di, 1, &v.data()[off..], 1, di, T::zero(), &mut dp, li, 1);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), masked entries have P = 0
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot);
                    }
                }
                // dQ = scale · dS · K, dK = scale · dS^T · Q
                T::gemm(len, len, dh, scale, &dp, li, 1, &k.data()[off..], di, 1, T::zero(), &mut dq[off..], di, 1);
                T::gemm(len, len, dh, scale, &dp, 1, li, &q.data()[off..], di, 1, T::zero(), &mut dk[off..], di, 1);
            }
            if needs[0] {
                grads[0] = like(q, dq);
            }
            if needs[1] {
                grads[1] = like(k, dk);
            }
            if needs[2] {
                grads[2] = like(v, dv);
            }
        }
        Kernel::CrossEntropy { labels } => {
            let Saved::Probs(p) = saved else { unreachable!("cross entropy saves probabilities") };
            let x = inputs[0];
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let u = g[0] / T::from_usize(rows).unwrap();
            let mut dx: Vec<T> = p.iter().map(|&v| v * u).collect();
            for (r, &l) in labels.iter().enumerate() {
                dx[r * cols + l] -= u;
            }
            grads[0] = like(x, dx);
        }
        Kernel::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let c = g[0] * T::from_f64_lossy(2.0) / T::from_usize(a.len()).unwrap();
            let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * c).collect();
            if needs[1] {
                grads[1] = like(b, diff.iter().map(|&v| -v).collect());
            }
            if needs[0] {
                grads[0] = like(a, diff);
            }
        }
    }
    for (slot, &need) in grads.iter_mut().zip(needs) {
        if !need {
            *slot = None;
        }
    }
    grads
}
