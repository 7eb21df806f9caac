//! Corpus alignment (stage 1), task-loss tuning on sampled data (stage 2),
//! soft clipping, and re-targeting a trained generator to a new architecture.

use std::fmt::Write as _;
use std::path::Path;

use gradcore::{GradError, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{argmax_rows, forward_logits, functional_forward, ArchError, ArchSpec, FlatParams, FrozenTables};
use crate::data::{sample_subset, sample_subset_with, DataError, DatasetHandle, Split};
use crate::generator::{Bound, GenError, GeneratorState, Instruction};
use crate::refcorpus::CheckpointCorpus;
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage} diverged in epoch {epoch} step {step}: {detail}")]
    Diverged {
        stage: u8,
        epoch: usize,
        step: usize,
        detail: String,
    },
    /// Unconstrained generated weights blew up the target's logits.
    #[error(
        "unbounded logits in epoch {epoch} step {step}: generated weights reached max |w| = {max_abs_weight:e} \
         without alignment or soft clipping ({detail})"
    )]
    UnboundedLogits {
        epoch: usize,
        step: usize,
        max_abs_weight: f64,
        detail: String,
    },
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error("corpus belongs to architecture {corpus:016x}, expected {arch:016x}")]
    CorpusMismatch { corpus: u64, arch: u64 },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Step-decay schedule: `initial · 0.5^floor(epoch / halve_every)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Zero disables decay.
    pub halve_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            halve_every: 10,
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    if schedule.halve_every == 0 {
        return schedule.initial;
    }
    let halvings = (epoch / schedule.halve_every).min(1074) as i32;
    schedule.initial * 0.5f64.powi(halvings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    /// Samples per step (stage 2).
    pub m: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn stage2() -> Self {
        Self::default()
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.m == 0 || !(self.lr.initial > 0.0) || !self.lr.initial.is_finite() {
            return Err(TrainError::Config(format!(
                "epochs, m and lr must be positive (got {}, {}, {})",
                self.epochs, self.m, self.lr.initial
            )));
        }
        Ok(())
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: LrSchedule::default(),
            m: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftClipConfig {
    pub enabled: bool,
    pub alpha: f64,
}

impl SoftClipConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            alpha: 1.0,
        }
    }

    pub fn with_alpha(alpha: f64) -> Self {
        Self { enabled: true, alpha }
    }

    fn validate(&self) -> Result<()> {
        if self.enabled && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::Config(format!("soft-clip alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for SoftClipConfig {
    fn default() -> Self {
        Self::off()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub test_acc: Option<f64>,
    pub lr: f64,
}

/// One record per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<EpochRecord>,
}

impl LossCurve {
    pub const CSV_HEADER: &'static str = "epoch,loss,test_acc,lr";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// First epoch whose loss is at or below `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.loss <= threshold).map(|r| r.epoch)
    }

    /// CSV text; `test_acc` is empty when not measured.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let acc = r.test_acc.map(|a| format!("{a}")).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.epoch, r.loss, acc, r.lr).expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// `alpha · tanh(w / alpha)` elementwise.
pub fn soft_clip(w: &FlatParams, alpha: f64, arch: &ArchSpec) -> Result<FlatParams> {
    SoftClipConfig::with_alpha(alpha).validate()?;
    let a = alpha as f32;
    let values = w.values().iter().map(|&v| a * (v / a).tanh()).collect();
    Ok(FlatParams::new(arch, values)?)
}

/// Graph form of [`soft_clip`].
pub fn soft_clip_var<T: Scalar>(g: &mut Graph<T>, w: Var, alpha: f64) -> Result<Var> {
    let a = T::from_f64(alpha).unwrap();
    let scaled = g.scale(w, T::one() / a)?;
    let bounded = g.tanh(scaled)?;
    Ok(g.scale(bounded, a)?)
}

/// Test-split accuracy of `flat`; argmax ties go to the lowest class.
pub fn evaluate(arch: &ArchSpec, flat: &FlatParams, split: &Split, tables: &FrozenTables) -> Result<f64> {
    let all: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(256) {
        let logits = forward_logits(arch, flat, &split.batch(chunk), tables)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == split.labels()[i])
            .count();
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

/// ‖a − b‖ / ‖b‖.
pub fn relative_distance(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let norm: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    (diff / norm).sqrt()
}

/// Applies `p -= lr · grad` to every learnable tensor. Returns a description
/// of the first non-finite gradient instead of updating, if any.
fn sgd_step(gen: &mut GeneratorState, bound: &Bound, grads: &mut gradcore::Gradients<f32>, lr: f32) -> Option<String> {
    let vars = bound.trainable();
    let mut taken = Vec::with_capacity(vars.len());
    for (v, (name, _)) in vars.iter().zip(gen.trainable_parameters()) {
        let grad = grads.take(*v).expect("leaf gradient");
        if !grad.is_finite() {
            return Some(format!("non-finite gradient for {name}"));
        }
        taken.push(grad);
    }
    for (t, grad) in gen.trainable_mut().into_iter().zip(taken) {
        for (w, d) in t.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * d;
        }
    }
    None
}

/// Options for evaluating test accuracy while aligning.
pub struct Stage1Eval<'a> {
    pub dataset: &'a DatasetHandle,
    pub tables: &'a FrozenTables,
}

/// Aligns generated weights with the corpus: one full-corpus step per epoch on
/// `(1/N) Σᵢ MSE(wᵢ, w_g)`, using the generic instruction and no context.
pub fn stage1_train(
    gen: &mut GeneratorState,
    corpus: &CheckpointCorpus,
    arch: &ArchSpec,
    config: &StageConfig,
    eval: Option<Stage1Eval<'_>>,
) -> Result<LossCurve> {
    config.validate()?;
    if corpus.arch_id != arch.id() {
        return Err(TrainError::CorpusMismatch {
            corpus: corpus.arch_id,
            arch: arch.id(),
        });
    }
    if corpus.is_empty() {
        return Err(TrainError::Config("empty corpus".into()));
    }
    gen.check_arch(arch)?;
    let instruction = Instruction::stage1(gen.config().max_seq_len)?;
    let targets: Vec<Tensor<f32>> = corpus
        .entries
        .iter()
        .map(|(w, _)| Tensor::new(&[w.len()], w.values().to_vec()).expect("flat vector"))
        .collect();
    let inv_n = 1.0 / corpus.len() as f32;
    let mut curve = LossCurve::default();
    for epoch in 0..config.epochs {
        let lr = lr_at(&config.lr, epoch);
        let mut g = Graph::<f32>::new();
        let bound = Bound::leaves(&mut g, gen);
        let w_g = bound.generate(&mut g, gen, &instruction, None, arch)?;
        let mut total: Option<Var> = None;
        for t in &targets {
            let t = g.constant(t.clone());
            let l = g.mse(t, w_g)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("non-empty corpus"), inv_n)?;
        let value = g.value(loss).item().expect("scalar loss") as f64;
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                stage: 1,
                epoch,
                step: 0,
                detail: format!("loss {value}"),
            });
        }
        let mut grads = g.backward(loss)?;
        if let Some(detail) = sgd_step(gen, &bound, &mut grads, lr as f32) {
            return Err(TrainError::Diverged {
                stage: 1,
                epoch,
                step: 0,
                detail,
            });
        }
        let test_acc = match &eval {
            Some(e) => {
                let w = gen.generate(&instruction, None, arch)?;
                Some(evaluate(arch, &w, &e.dataset.test, e.tables)?)
            }
            None => None,
        };
        curve.records.push(EpochRecord {
            epoch,
            loss: value,
            test_acc,
            lr,
        });
    }
    Ok(curve)
}

/// Fixed context batch used for per-epoch evaluation.
pub fn eval_context_indices(dataset: &DatasetHandle, m: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(sample_subset(&dataset.train, m, derive_seed(seed, "stage2/eval-context"))?)
}

/// Weights generated from the fixed evaluation context, soft-clipped when enabled.
pub fn generate_for_eval(
    gen: &GeneratorState,
    dataset: &DatasetHandle,
    instruction: &Instruction,
    arch: &ArchSpec,
    config: &StageConfig,
    softclip: &SoftClipConfig,
) -> Result<FlatParams> {
    let idx = eval_context_indices(dataset, config.m, config.seed)?;
    let w = gen.generate(instruction, Some(&dataset.train.batch(&idx)), arch)?;
    if softclip.enabled {
        soft_clip(&w, softclip.alpha, arch)
    } else {
        Ok(w)
    }
}

/// Outcome of stage 2: the curve and the final evaluated weights.
#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub curve: LossCurve,
    pub weights: FlatParams,
    pub test_accuracy: f64,
}

/// Task-loss tuning: every step samples `m` training samples, encodes them
/// as context, generates weights, and descends the mean cross-entropy of the
/// generated network on those samples.
#[allow(clippy::too_many_arguments)]
pub fn stage2_train(
    gen: &mut GeneratorState,
    dataset: &DatasetHandle,
    tables: &FrozenTables,
    instruction: &Instruction,
    arch: &ArchSpec,
    config: &StageConfig,
    softclip: &SoftClipConfig,
    stage1_done: bool,
) -> Result<Stage2Outcome> {
    config.validate()?;
    softclip.validate()?;
    gen.check_arch(arch)?;
    let train = &dataset.train;
    if config.m > train.len() {
        return Err(DataError::SubsetTooLarge {
            m: config.m,
            available: train.len(),
        }
        .into());
    }
    let steps = train.len().div_ceil(config.m);
    let mut rng = stream_rng(config.seed, "stage2/subsets");
    let mut curve = LossCurve::default();
    let mut weights = FlatParams::zeros(arch);
    let mut test_accuracy = 0.0;
    for epoch in 0..config.epochs {
        let lr = lr_at(&config.lr, epoch);
        let mut total = 0.0f64;
        for step in 0..steps {
            let idx = sample_subset_with(train, config.m, &mut rng)?;
            let batch = train.batch(&idx);
            let labels = train.batch_labels(&idx);
            let mut g = Graph::<f32>::new();
            let bound = Bound::leaves(&mut g, gen);
            let failure = |detail: String, g: &Graph<f32>, w: Option<Var>| {
                let max_abs_weight = w.map_or(f64::NAN, |w| {
                    g.value(w).data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
                });
                if !stage1_done && !softclip.enabled {
                    TrainError::UnboundedLogits {
                        epoch,
                        step,
                        max_abs_weight,
                        detail,
                    }
                } else {
                    TrainError::Diverged {
                        stage: 2,
                        epoch,
                        step,
                        detail,
                    }
                }
            };
            let mut w = bound.generate(&mut g, gen, instruction, Some(&batch), arch)?;
            if softclip.enabled {
                w = soft_clip_var(&mut g, w, softclip.alpha)?;
            }
            let loss = match functional_forward(&mut g, arch, w, &batch, tables)
                .map_err(TrainError::from)
                .and_then(|logits| Ok(g.cross_entropy(logits, &labels)?))
            {
                Ok(l) => l,
                Err(TrainError::Arch(ArchError::Grad(e @ GradError::NonFinite { .. })) | TrainError::Grad(e @ GradError::NonFinite { .. })) => {
                    return Err(failure(e.to_string(), &g, Some(w)))
                }
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item().expect("scalar loss") as f64;
            if !value.is_finite() {
                return Err(failure(format!("loss {value}"), &g, Some(w)));
            }
            total += value;
            let mut grads = g.backward(loss)?;
            if let Some(detail) = sgd_step(gen, &bound, &mut grads, lr as f32) {
                return Err(failure(detail, &g, Some(w)));
            }
        }
        weights = generate_for_eval(gen, dataset, instruction, arch, config, softclip)?;
        test_accuracy = evaluate(arch, &weights, &dataset.test, tables)?;
        curve.records.push(EpochRecord {
            epoch,
            loss: total / steps as f64,
            test_acc: Some(test_accuracy),
            lr,
        });
    }
    Ok(Stage2Outcome {
        curve,
        weights,
        test_accuracy,
    })
}

/// Re-targets a trained generator to `arch_small` (fresh head and special-token
/// rows, LoRA kept) and runs stage 2 only.
#[allow(clippy::too_many_arguments)]
pub fn adapt_architecture(
    gen: &mut GeneratorState,
    arch_small: &ArchSpec,
    dataset: &DatasetHandle,
    tables: &FrozenTables,
    instruction: &Instruction,
    config: &StageConfig,
    softclip: &SoftClipConfig,
) -> Result<Stage2Outcome> {
    if arch_small.id() == gen.target().arch_id {
        return Err(TrainError::Config("adaptation target equals the current architecture".into()));
    }
    gen.retarget(arch_small, derive_seed(config.seed, "adapt/head"));
    stage2_train(gen, dataset, tables, instruction, arch_small, config, softclip, true)
}
