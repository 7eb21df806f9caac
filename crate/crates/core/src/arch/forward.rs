use std::collections::BTreeMap;

use gradcore::{Graph, Kernel, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{ArchError, ArchSpec, FlatParams, LayerSpec, Result, TensorRole, PAD_ID};
use crate::seed::stream_rng;

/// A batch of network inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum InputBatch {
    /// Shape `[batch, ..input_shape]`.
    Dense(Tensor<f32>),
    /// Row-major `[batch, len]` token ids, right-padded with [`PAD_ID`].
    Tokens { ids: Vec<u32>, batch: usize, len: usize },
}

impl InputBatch {
    pub fn batch_size(&self) -> usize {
        match self {
            InputBatch::Dense(t) => t.shape().first().copied().unwrap_or(0),
            InputBatch::Tokens { batch, .. } => *batch,
        }
    }

    fn check(&self, arch: &ArchSpec) -> Result<()> {
        let wants_tokens = matches!(arch.layers.first(), Some(LayerSpec::EmbeddingRef { .. }));
        if wants_tokens != matches!(self, InputBatch::Tokens { .. }) {
            return Err(ArchError::BatchShape {
                expected: arch.input_shape.clone(),
                got: match self {
                    InputBatch::Dense(t) => t.shape().to_vec(),
                    InputBatch::Tokens { batch, len, .. } => vec![*batch, *len],
                },
            });
        }
        let (expected, got) = match self {
            InputBatch::Dense(t) => {
                let expected: Vec<usize> = std::iter::once(self.batch_size()).chain(arch.input_shape.iter().copied()).collect();
                (expected, t.shape().to_vec())
            }
            InputBatch::Tokens { ids, batch, len } => {
                if ids.len() != batch * len {
                    return Err(ArchError::BatchShape {
                        expected: vec![*batch, *len],
                        got: vec![ids.len()],
                    });
                }
                (
                    std::iter::once(*batch).chain(arch.input_shape.iter().copied()).collect(),
                    vec![*batch, *len],
                )
            }
        };
        if expected != got || got.first() == Some(&0) {
            return Err(ArchError::BatchShape { expected, got });
        }
        Ok(())
    }
}

/// Embedding tables that live outside the parameter vector, keyed by layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenTables {
    tables: BTreeMap<usize, Tensor<f32>>,
}

impl FrozenTables {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Gaussian N(0, 1/dim) tables for every frozen embedding layer of `arch`.
    pub fn seeded(arch: &ArchSpec, seed: u64) -> Self {
        let mut tables = BTreeMap::new();
        for (layer, vocab, dim) in arch.frozen_embeddings() {
            let mut rng = stream_rng(seed, &format!("embedding/{vocab}x{dim}"));
            let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("positive std");
            let data = (0..vocab * dim).map(|_| normal.sample(&mut rng) as f32).collect();
            tables.insert(layer, Tensor::new(&[vocab, dim], data).expect("sized table"));
        }
        Self { tables }
    }

    pub fn insert(&mut self, layer: usize, table: Tensor<f32>) {
        self.tables.insert(layer, table);
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor<f32>> {
        self.tables.get(&layer)
    }

    /// Content hash, used to assert that tables never change.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (layer, t) in &self.tables {
            h.update((*layer as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Per-sample real-token counts (ids other than [`PAD_ID`]).
pub(crate) fn token_lengths(ids: &[u32], batch: usize, len: usize) -> Vec<usize> {
    (0..batch)
        .map(|b| ids[b * len..(b + 1) * len].iter().filter(|&&t| t != PAD_ID).count())
        .collect()
}

/// Differentiable forward pass taking the whole parameter vector as one
/// rank-1 graph value. Returns logits `[batch, num_classes]`.
pub fn functional_forward<T: Scalar>(
    g: &mut Graph<T>,
    arch: &ArchSpec,
    params: Var,
    batch: &InputBatch,
    tables: &FrozenTables,
) -> Result<Var> {
    let got = g.value(params).shape().to_vec();
    if got != [arch.param_count()] {
        return Err(ArchError::Length {
            expected: arch.param_count(),
            got: got.iter().product(),
            first_segment: 0,
        });
    }
    batch.check(arch)?;
    let mut segments = Vec::with_capacity(arch.layout().segments.len());
    for seg in &arch.layout().segments {
        let part = g.rows(params, seg.offset, seg.offset + seg.len)?;
        segments.push(g.reshape(part, &seg.shape)?);
    }
    let param = |layer: usize, role: TensorRole| {
        arch.layout()
            .segments
            .iter()
            .position(|s| s.layer == layer && s.role == role)
            .map(|i| segments[i])
    };

    let b = batch.batch_size();
    let mut lengths = Vec::new();
    let mut x = match batch {
        InputBatch::Dense(t) => g.constant(t.cast()),
        InputBatch::Tokens { .. } => g.constant(Tensor::zeros(&[0])),
    };
    for (i, layer) in arch.layers.iter().enumerate() {
        x = match layer {
            LayerSpec::Conv2d { stride, padding, .. } => {
                let w = param(i, TensorRole::Weight).expect("conv weight");
                let bias = param(i, TensorRole::Bias).expect("conv bias");
                g.apply(
                    Kernel::Conv2d {
                        stride: *stride,
                        padding: *padding,
                    },
                    &[x, w, bias],
                )?
            }
            LayerSpec::Relu => g.relu(x)?,
            LayerSpec::MaxPool2d { k } => g.apply(Kernel::MaxPool2d { k: *k }, &[x])?,
            LayerSpec::GlobalAvgPool => g.apply(Kernel::GlobalAvgPool, &[x])?,
            LayerSpec::Flatten => {
                let n = g.value(x).len() / b;
                g.reshape(x, &[b, n])?
            }
            LayerSpec::Linear { .. } => {
                let w = param(i, TensorRole::Weight).expect("linear weight");
                let bias = param(i, TensorRole::Bias);
                g.linear(x, w, bias)?
            }
            LayerSpec::EmbeddingRef { frozen, .. } => {
                let InputBatch::Tokens { ids, batch, len } = batch else {
                    unreachable!("checked by input activation")
                };
                lengths = token_lengths(ids, *batch, *len);
                // time-major: row t*batch + b holds token t of sample b
                let tm: Vec<usize> = (0..*len)
                    .flat_map(|t| (0..*batch).map(move |s| ids[s * len + t] as usize))
                    .collect();
                let table = if *frozen {
                    let t = tables.get(i).ok_or(ArchError::MissingTable(i))?;
                    g.constant(t.cast())
                } else {
                    param(i, TensorRole::Weight).expect("embedding weight")
                };
                g.apply(Kernel::EmbeddingLookup { ids: tm }, &[table])?
            }
            LayerSpec::MeanPoolTokens => {
                let InputBatch::Tokens { ids, len, .. } = batch else {
                    unreachable!("checked by input activation")
                };
                let mut pool = vec![T::zero(); b * len * b];
                for s in 0..b {
                    let inv = T::one() / T::from_usize(lengths[s].max(1)).unwrap();
                    for t in 0..*len {
                        if ids[s * len + t] != PAD_ID {
                            pool[s * len * b + t * b + s] = inv;
                        }
                    }
                }
                let pool = g.constant(Tensor::new(&[b, len * b], pool)?);
                g.matmul(pool, x)?
            }
            LayerSpec::RnnVanilla { hidden } => {
                let hidden = *hidden;
                let w_ih = param(i, TensorRole::Weight).expect("rnn input weight");
                let w_hh = param(i, TensorRole::Recurrent).expect("rnn recurrent weight");
                let bias = param(i, TensorRole::Bias).expect("rnn bias");
                let InputBatch::Tokens { ids, len, .. } = batch else {
                    unreachable!("checked by input activation")
                };
                let real = |s: usize, t: usize| ids[s * len + t] != PAD_ID;
                // Steps past every sample's last real token cannot change any state.
                let steps = (0..b)
                    .filter_map(|s| (0..*len).rev().find(|&t| real(s, t)))
                    .max()
                    .map_or(1, |t| t + 1);
                let mut states: Vec<Var> = Vec::with_capacity(steps);
                for t in 0..steps {
                    let x_t = g.rows(x, t * b, (t + 1) * b)?;
                    let mut pre = g.linear(x_t, w_ih, None)?;
                    if let Some(&h) = states.last() {
                        let rec = g.linear(h, w_hh, None)?;
                        pre = g.add(pre, rec)?;
                    }
                    let pre = g.add(pre, bias)?;
                    let fresh = g.tanh(pre)?;
                    let next = if (0..b).all(|s| real(s, t)) {
                        fresh
                    } else {
                        // Padding keeps the previous state: h + m ⊙ (fresh − h).
                        let mask: Vec<T> = (0..b)
                            .flat_map(|s| std::iter::repeat_n(if real(s, t) { T::one() } else { T::zero() }, hidden))
                            .collect();
                        let mask = g.constant(Tensor::new(&[b, hidden], mask)?);
                        match states.last() {
                            Some(&h) => {
                                let neg = g.scale(h, -T::one())?;
                                let delta = g.add(fresh, neg)?;
                                let delta = g.mul(mask, delta)?;
                                g.add(h, delta)?
                            }
                            None => g.mul(mask, fresh)?,
                        }
                    };
                    states.push(next);
                }
                g.concat(&states)?
            }
            LayerSpec::TakeLastHidden => {
                let steps = g.value(x).shape()[0] / b;
                g.rows(x, (steps - 1) * b, steps * b)?
            }
        };
    }
    Ok(x)
}

/// Logits for `batch` under `flat`, computed without recording gradients.
pub fn forward_logits(arch: &ArchSpec, flat: &FlatParams, batch: &InputBatch, tables: &FrozenTables) -> Result<Tensor<f32>> {
    flat.check_arch(arch)?;
    let mut g = Graph::<f32>::new();
    let p = g.constant(Tensor::new(&[flat.len()], flat.values().to_vec())?);
    let out = functional_forward(&mut g, arch, p, batch, tables)?;
    Ok(g.value(out).clone())
}

/// Row-wise argmax; ties go to the lowest class index.
pub(crate) fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let cols = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per sample.
pub fn predict(arch: &ArchSpec, flat: &FlatParams, batch: &InputBatch, tables: &FrozenTables) -> Result<Vec<usize>> {
    forward_logits(arch, flat, batch, tables).map(|l| argmax_rows(&l))
}

/// Fills a tensor with N(0, std²) draws.
pub(crate) fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng) as f32).collect()).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_arch, ArchKind};

    #[test]
    fn zero_weights_give_uniform_logits() {
        let arch = builtin_arch(ArchKind::Cnn3, &[1, 14, 14], 10).unwrap();
        let x = Tensor::new(&[2, 1, 14, 14], (0..392).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let logits = forward_logits(&arch, &FlatParams::zeros(&arch), &InputBatch::Dense(x), &FrozenTables::empty()).unwrap();
        assert_eq!(logits.shape(), [2, 10]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rnn_with_only_bias_ends_at_tanh_of_bias() {
        let arch = builtin_arch(ArchKind::RnnText, &[5], 2).unwrap();
        let tables = FrozenTables::seeded(&arch, 3);
        let mut values = vec![0.0f32; arch.param_count()];
        let bias = arch.layout().find(1, TensorRole::Bias).unwrap().clone();
        for (k, v) in values[bias.range()].iter_mut().enumerate() {
            *v = (k as f32 - 32.0) / 20.0;
        }
        // identity-like readout of the first two hidden units
        let head = arch.layout().find(3, TensorRole::Weight).unwrap().clone();
        values[head.offset] = 1.0;
        values[head.offset + 64 + 1] = 1.0;
        let flat = FlatParams::new(&arch, values).unwrap();
        let ids = vec![72, 105, 33, PAD_ID, PAD_ID, 1, 2, 3, 4, 5];
        let logits = forward_logits(&arch, &flat, &InputBatch::Tokens { ids, batch: 2, len: 5 }, &tables).unwrap();
        let expect = [(-32.0f32 / 20.0).tanh(), (-31.0f32 / 20.0).tanh()];
        for row in logits.data().chunks(2) {
            assert_eq!(row, expect);
        }
    }

    #[test]
    fn batch_shape_is_checked() {
        let arch = builtin_arch(ArchKind::Mlp, &[3], 2).unwrap();
        let x = Tensor::zeros(&[4, 2]);
        let err = forward_logits(&arch, &FlatParams::zeros(&arch), &InputBatch::Dense(x), &FrozenTables::empty());
        assert!(matches!(err, Err(ArchError::BatchShape { .. })));
    }

    #[test]
    fn argmax_ties_prefer_lowest_index() {
        let t = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), [0, 1]);
    }
}
