//! Classically trained reference networks and the checkpoint corpus built
//! from them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use gradcore::{Graph, Kernel, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{
    flatten, slice, ArchError, ArchSpec, FlatParams, FrozenTables, InputBatch, LayerSpec, TensorRole, PAD_ID,
};
use crate::binio::{read_array, read_blob, read_f32s, read_u64, write_blob, write_f32s, write_u64};
use crate::data::{DataError, DatasetHandle, Split};
use crate::seed::stream_rng;
use crate::training::{lr_at, LrSchedule};

pub const CORPUS_MAGIC: &[u8; 8] = b"NGPCv001";

#[derive(Debug, Error)]
pub enum RefError {
    #[error("seed {seed}: training diverged in epoch {epoch} (loss {loss})")]
    Diverged { seed: u64, epoch: usize, loss: f32 },
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<RefError>,
    },
    #[error("dataset samples {data:?} do not fit architecture input {arch:?}")]
    InputMismatch { data: Vec<usize>, arch: Vec<usize> },
    #[error("dataset has {data} classes, architecture emits {arch}")]
    ClassMismatch { data: usize, arch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus file: {0}")]
    File(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grad(#[from] gradcore::GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RefError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr.initial > 0.0) {
            return Err(RefError::Config(format!(
                "epochs, batch_size and lr must be positive (got {}, {}, {})",
                self.epochs, self.batch_size, self.lr.initial
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: f32,
    pub test_accuracy: f64,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointCorpus {
    pub arch_id: u64,
    pub entries: Vec<(FlatParams, CheckpointMeta)>,
}

impl CheckpointCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_len(&self) -> usize {
        self.entries.first().map_or(0, |(w, _)| w.len())
    }
}

/// A target network holding one tensor per layout segment, trained with its
/// own layer-by-layer forward pass.
#[derive(Debug, Clone)]
pub struct ReferenceNet {
    arch: ArchSpec,
    tables: FrozenTables,
    params: Vec<Tensor<f32>>,
}

impl ReferenceNet {
    /// Scaled Gaussian initialization (He for ReLU layers, 1/fan_in for the
    /// output and recurrent layers); biases start at zero.
    pub fn init(arch: &ArchSpec, tables: &FrozenTables, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "reference/init");
        let last_linear = arch.layers.iter().rposition(|l| matches!(l, LayerSpec::Linear { .. }));
        let params = arch
            .layout()
            .segments
            .iter()
            .map(|seg| {
                if seg.role == TensorRole::Bias {
                    return Tensor::zeros(&seg.shape);
                }
                let fan_in: usize = seg.shape[1..].iter().product();
                let gain = match arch.layers[seg.layer] {
                    LayerSpec::Conv2d { .. } => 2.0,
                    LayerSpec::Linear { .. } if Some(seg.layer) != last_linear => 2.0,
                    _ => 1.0,
                };
                crate::arch::gaussian(&seg.shape, (gain / fan_in as f64).sqrt(), &mut rng)
            })
            .collect();
        Self {
            arch: arch.clone(),
            tables: tables.clone(),
            params,
        }
    }

    pub fn from_flat(arch: &ArchSpec, flat: &FlatParams, tables: &FrozenTables) -> Result<Self> {
        flat.check_arch(arch)?;
        Ok(Self {
            arch: arch.clone(),
            tables: tables.clone(),
            params: slice(flat),
        })
    }

    pub fn to_flat(&self) -> Result<FlatParams> {
        Ok(flatten(&self.params, &self.arch)?)
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    /// Logits for `batch` without recording gradients.
    pub fn logits(&self, batch: &InputBatch) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let out = self.forward(&mut g, &vars, batch)?;
        Ok(g.value(out).clone())
    }

    /// Same as [`Self::logits`] in double precision.
    pub fn logits_f64(&self, batch: &InputBatch) -> Result<Tensor<f64>> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.cast())).collect();
        let out = self.forward(&mut g, &vars, batch)?;
        Ok(g.value(out).clone())
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], batch: &InputBatch) -> Result<Var> {
        let layout = self.arch.layout();
        let get = |layer: usize, role: TensorRole| -> Var {
            let i = layout
                .segments
                .iter()
                .position(|s| s.layer == layer && s.role == role)
                .expect("layout has the segment");
            vars[i]
        };
        let n = batch.batch_size();
        // per-sample (time-major) mask of real tokens
        let mut mask: Vec<Vec<bool>> = Vec::new();
        let mut x = match batch {
            InputBatch::Dense(t) => {
                let expected: Vec<usize> = std::iter::once(n).chain(self.arch.input_shape.iter().copied()).collect();
                if t.shape() != expected.as_slice() {
                    return Err(ArchError::BatchShape {
                        expected,
                        got: t.shape().to_vec(),
                    }
                    .into());
                }
                g.constant(t.cast())
            }
            InputBatch::Tokens { .. } => g.constant(Tensor::zeros(&[0])),
        };
        for (i, layer) in self.arch.layers.iter().enumerate() {
            x = match layer {
                LayerSpec::Conv2d { stride, padding, .. } => g.apply(
                    Kernel::Conv2d {
                        stride: *stride,
                        padding: *padding,
                    },
                    &[x, get(i, TensorRole::Weight), get(i, TensorRole::Bias)],
                )?,
                LayerSpec::Relu => g.relu(x)?,
                LayerSpec::MaxPool2d { k } => g.apply(Kernel::MaxPool2d { k: *k }, &[x])?,
                LayerSpec::GlobalAvgPool => g.apply(Kernel::GlobalAvgPool, &[x])?,
                LayerSpec::Flatten => {
                    let per = g.value(x).len() / n;
                    g.reshape(x, &[n, per])?
                }
                LayerSpec::Linear { .. } => {
                    let y = g.matmul_t(x, get(i, TensorRole::Weight))?;
                    g.add(y, get(i, TensorRole::Bias))?
                }
                LayerSpec::EmbeddingRef { frozen, .. } => {
                    let InputBatch::Tokens { ids, batch, len } = batch else {
                        return Err(ArchError::BatchShape {
                            expected: self.arch.input_shape.clone(),
                            got: vec![],
                        }
                        .into());
                    };
                    if *len != self.arch.input_shape[0] || ids.len() != batch * len {
                        return Err(ArchError::BatchShape {
                            expected: vec![*batch, self.arch.input_shape[0]],
                            got: vec![*batch, *len],
                        }
                        .into());
                    }
                    mask = (0..*len)
                        .map(|t| (0..*batch).map(|s| ids[s * len + t] != PAD_ID).collect())
                        .collect();
                    let order = (0..*len).flat_map(|t| (0..*batch).map(move |s| ids[s * len + t] as usize)).collect();
                    let table = if *frozen {
                        let t = self.tables.get(i).ok_or(ArchError::MissingTable(i))?;
                        g.constant(t.cast())
                    } else {
                        get(i, TensorRole::Weight)
                    };
                    g.apply(Kernel::EmbeddingLookup { ids: order }, &[table])?
                }
                LayerSpec::MeanPoolTokens => {
                    let dim = g.value(x).shape()[1];
                    let mut sum: Option<Var> = None;
                    for (t, real) in mask.iter().enumerate() {
                        let step = g.rows(x, t * n, (t + 1) * n)?;
                        let m = keep_rows::<T>(real, dim);
                        let m = g.constant(m);
                        let kept = g.mul(step, m)?;
                        sum = Some(match sum {
                            Some(s) => g.add(s, kept)?,
                            None => kept,
                        });
                    }
                    let counts: Vec<T> = (0..n)
                        .flat_map(|s| {
                            let c = mask.iter().filter(|r| r[s]).count().max(1);
                            std::iter::repeat_n(T::one() / T::from_usize(c).unwrap(), dim)
                        })
                        .collect();
                    let inv = g.constant(Tensor::new(&[n, dim], counts)?);
                    g.mul(sum.expect("at least one step"), inv)?
                }
                LayerSpec::RnnVanilla { hidden } => {
                    let (w_ih, w_hh, b) = (
                        get(i, TensorRole::Weight),
                        get(i, TensorRole::Recurrent),
                        get(i, TensorRole::Bias),
                    );
                    // masked update: padded steps leave the state unchanged
                    let mut h = g.constant(Tensor::zeros(&[n, *hidden]));
                    let mut first = true;
                    for (t, real) in mask.iter().enumerate() {
                        let x_t = g.rows(x, t * n, (t + 1) * n)?;
                        let a = g.matmul_t(x_t, w_ih)?;
                        let r = g.matmul_t(h, w_hh)?;
                        let pre = g.add(a, r)?;
                        let pre = g.add(pre, b)?;
                        let h_new = g.tanh(pre)?;
                        let keep: Vec<bool> = if first {
                            vec![true; n]
                        } else {
                            real.clone()
                        };
                        first = false;
                        let m = g.constant(keep_rows::<T>(&keep, *hidden));
                        let neg_h = g.scale(h, -T::one())?;
                        let delta = g.add(h_new, neg_h)?;
                        let delta = g.mul(delta, m)?;
                        h = g.add(h, delta)?;
                    }
                    h
                }
                LayerSpec::TakeLastHidden => x,
            };
        }
        Ok(x)
    }

    fn loss(&self, g: &mut Graph<f32>, vars: &[Var], batch: &InputBatch, labels: &[usize]) -> Result<Var> {
        let logits = self.forward(g, vars, batch)?;
        Ok(g.cross_entropy(logits, labels)?)
    }

    /// Fraction of `split` classified correctly (argmax ties go to the lowest class).
    pub fn accuracy(&self, split: &Split) -> Result<f64> {
        let mut correct = 0;
        let all: Vec<usize> = (0..split.len()).collect();
        for chunk in all.chunks(256) {
            let logits = self.logits(&split.batch(chunk))?;
            let k = logits.shape()[1];
            for (row, &i) in logits.data().chunks(k).zip(chunk) {
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                correct += usize::from(best == split.labels()[i]);
            }
        }
        Ok(correct as f64 / split.len().max(1) as f64)
    }
}

fn keep_rows<T: Scalar>(keep: &[bool], width: usize) -> Tensor<T> {
    let data = keep
        .iter()
        .flat_map(|&k| std::iter::repeat_n(if k { T::one() } else { T::zero() }, width))
        .collect();
    Tensor::new(&[keep.len(), width], data).expect("mask shape")
}

fn check_dataset(arch: &ArchSpec, dataset: &DatasetHandle) -> Result<()> {
    if dataset.input_shape() != arch.input_shape {
        return Err(RefError::InputMismatch {
            data: dataset.input_shape(),
            arch: arch.input_shape.clone(),
        });
    }
    if dataset.num_classes != arch.num_classes {
        return Err(RefError::ClassMismatch {
            data: dataset.num_classes,
            arch: arch.num_classes,
        });
    }
    Ok(())
}

/// Per-epoch statistics of a classical run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f32,
    pub test_accuracy: f64,
    pub lr: f64,
}

/// Minibatch SGD on cross-entropy; deterministic given `seed`.
pub fn train_reference(
    arch: &ArchSpec,
    tables: &FrozenTables,
    dataset: &DatasetHandle,
    seed: u64,
    config: &TrainConfig,
) -> Result<(FlatParams, CheckpointMeta)> {
    let (net, meta, _) = train_reference_logged(arch, tables, dataset, seed, config, false)?;
    Ok((net.to_flat()?, meta))
}

/// Like [`train_reference`], also returning the trained network and, when
/// `track_accuracy` is set, a per-epoch curve with test accuracy.
pub fn train_reference_logged(
    arch: &ArchSpec,
    tables: &FrozenTables,
    dataset: &DatasetHandle,
    seed: u64,
    config: &TrainConfig,
    track_accuracy: bool,
) -> Result<(ReferenceNet, CheckpointMeta, Vec<EpochStat>)> {
    config.validate()?;
    check_dataset(arch, dataset)?;
    let mut net = ReferenceNet::init(arch, tables, seed);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut rng = stream_rng(seed, "reference/shuffle");
    let mut curve = Vec::with_capacity(config.epochs);
    let mut epoch_loss = f32::NAN;
    for epoch in 0..config.epochs {
        let lr = lr_at(&config.lr, epoch) as f32;
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut seen = 0usize;
        // A short trailing batch gives one very noisy step at the end of
        // every epoch, so it is dropped (reshuffling covers it next epoch).
        let batches: Vec<&[usize]> = if order.len() < config.batch_size {
            vec![&order[..]]
        } else {
            order.chunks_exact(config.batch_size).collect()
        };
        for chunk in batches {
            let batch = dataset.train.batch(chunk);
            let labels = dataset.train.batch_labels(chunk);
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = net.params.iter().map(|p| g.leaf(p.clone())).collect();
            let loss = net.loss(&mut g, &vars, &batch, &labels)?;
            let value = g.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(RefError::Diverged { seed, epoch, loss: value });
            }
            total += value as f64 * chunk.len() as f64;
            seen += chunk.len();
            let mut grads = g.backward(loss)?;
            for (p, v) in net.params.iter_mut().zip(&vars) {
                let grad = grads.take(*v).expect("leaf gradient");
                for (w, d) in p.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * d;
                }
            }
        }
        epoch_loss = (total / seen as f64) as f32;
        let test_accuracy = if track_accuracy { net.accuracy(&dataset.test)? } else { f64::NAN };
        curve.push(EpochStat {
            epoch,
            loss: epoch_loss,
            test_accuracy,
            lr: lr as f64,
        });
    }
    let meta = CheckpointMeta {
        seed,
        epochs: config.epochs,
        final_train_loss: epoch_loss,
        test_accuracy: net.accuracy(&dataset.test)?,
        dataset_id: dataset.id.clone(),
    };
    Ok((net, meta, curve))
}

/// Worker count: `NEUROGEN_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("NEUROGEN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains `n` references with seeds `base_seed..base_seed + n`, in parallel.
pub fn build_corpus(
    arch: &ArchSpec,
    tables: &FrozenTables,
    dataset: &DatasetHandle,
    n: usize,
    base_seed: u64,
    config: &TrainConfig,
) -> Result<CheckpointCorpus> {
    if n == 0 {
        return Err(RefError::Config("corpus size must be at least 1".into()));
    }
    config.validate()?;
    check_dataset(arch, dataset)?;
    let workers = worker_count().min(n);
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let mut results: Vec<Option<Result<(FlatParams, CheckpointMeta)>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let seeds = &seeds;
                scope.spawn(move || {
                    (w..seeds.len())
                        .step_by(workers)
                        .map(|i| (i, train_reference(arch, tables, dataset, seeds[i], config)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("corpus worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut entries = Vec::with_capacity(n);
    for (seed, r) in seeds.iter().zip(results) {
        match r.expect("every seed ran") {
            Ok(e) => entries.push(e),
            Err(e @ RefError::Diverged { .. }) => return Err(e),
            Err(e) => {
                return Err(RefError::Seed {
                    seed: *seed,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(CheckpointCorpus {
        arch_id: arch.id(),
        entries,
    })
}

/// Per-coordinate mean and (population) variance over the corpus.
pub fn corpus_stats(corpus: &CheckpointCorpus) -> (Vec<f64>, Vec<f64>) {
    let d = corpus.param_len();
    let n = corpus.len().max(1) as f64;
    let mut mean = vec![0.0f64; d];
    for (w, _) in &corpus.entries {
        for (m, &v) in mean.iter_mut().zip(w.values()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for (w, _) in &corpus.entries {
        for ((s, &v), m) in var.iter_mut().zip(w.values()).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

pub fn encode_corpus(corpus: &CheckpointCorpus) -> Vec<u8> {
    let mut out = Vec::new();
    write_corpus_to(&mut out, corpus).expect("writing to memory");
    out
}

fn write_corpus_to(w: &mut impl Write, corpus: &CheckpointCorpus) -> std::io::Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    write_u64(w, corpus.arch_id)?;
    write_u64(w, corpus.len() as u64)?;
    write_u64(w, corpus.param_len() as u64)?;
    for (flat, meta) in &corpus.entries {
        write_f32s(w, flat.values())?;
        let json = serde_json::to_vec(meta).expect("metadata serializes");
        write_blob(w, &json)?;
    }
    Ok(())
}

pub fn decode_corpus(bytes: &[u8], arch: &ArchSpec) -> Result<CheckpointCorpus> {
    read_corpus_from(&mut Cursor::new(bytes), arch)
}

fn read_corpus_from(r: &mut impl Read, arch: &ArchSpec) -> Result<CheckpointCorpus> {
    let magic = read_array::<8>(r)?;
    if &magic != CORPUS_MAGIC {
        return Err(RefError::File(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let found = read_u64(r)?;
    if found != arch.id() {
        return Err(ArchError::ArchMismatch {
            expected: arch.id(),
            found,
        }
        .into());
    }
    let n = read_u64(r)? as usize;
    let len = read_u64(r)? as usize;
    if n == 0 {
        return Err(RefError::File("corpus holds no entries".into()));
    }
    if len != arch.param_count() {
        return Err(ArchError::Length {
            expected: arch.param_count(),
            got: len,
            first_segment: 0,
        }
        .into());
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let values = read_f32s(r, len)?;
        let json = read_blob(r, 1 << 20)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&json).map_err(|e| RefError::File(format!("entry {i} metadata: {e}")))?;
        entries.push((FlatParams::new(arch, values)?, meta));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(RefError::File("trailing bytes after last entry".into()));
    }
    Ok(CheckpointCorpus {
        arch_id: found,
        entries,
    })
}

pub fn write_corpus(path: &Path, corpus: &CheckpointCorpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus_to(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, arch: &ArchSpec) -> Result<CheckpointCorpus> {
    read_corpus_from(&mut BufReader::new(File::open(path)?), arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_arch, ArchKind};

    fn corpus_of(arch: &ArchSpec, rows: &[Vec<f32>]) -> CheckpointCorpus {
        CheckpointCorpus {
            arch_id: arch.id(),
            entries: rows
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    (
                        FlatParams::new(arch, v.clone()).unwrap(),
                        CheckpointMeta {
                            seed: i as u64,
                            epochs: 1,
                            final_train_loss: 0.5,
                            test_accuracy: 0.75,
                            dataset_id: "t".into(),
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn stats_of_opposite_pair() {
        let arch = builtin_arch(ArchKind::Mlp, &[1], 2).unwrap();
        let w: Vec<f32> = (0..arch.param_count()).map(|i| i as f32 * 0.25 - 3.0).collect();
        let neg: Vec<f32> = w.iter().map(|v| -v).collect();
        let (mean, var) = corpus_stats(&corpus_of(&arch, &[w.clone(), neg]));
        assert!(mean.iter().all(|&m| m == 0.0));
        for (v, x) in var.iter().zip(&w) {
            assert_eq!(*v, (*x as f64).powi(2));
        }
    }

    #[test]
    fn corpus_bytes_round_trip() {
        let arch = builtin_arch(ArchKind::Mlp, &[2], 3).unwrap();
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|s| (0..arch.param_count()).map(|i| ((i * 7 + s) % 13) as f32 / 13.0 - 0.5).collect())
            .collect();
        let corpus = corpus_of(&arch, &rows);
        let bytes = encode_corpus(&corpus);
        assert_eq!(&bytes[..8], CORPUS_MAGIC);
        let back = decode_corpus(&bytes, &arch).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(encode_corpus(&back), bytes);
    }
}
