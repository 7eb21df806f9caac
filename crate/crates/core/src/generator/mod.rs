//! The weight generator: a frozen decoder with learnable special tokens `P`,
//! LoRA adapters `φ` on the query/value maps, and a projection head plus
//! context encoders `θ`.

mod checkpoint;
mod decoder;

use std::ops::Range;

use gradcore::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{gaussian, ArchError, ArchSpec, FlatParams, InputBatch, BYTE_VOCAB};
use crate::data::Modality;
use crate::seed::stream_rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use decoder::Bound;

/// Generic instruction used while aligning against the checkpoint corpus.
pub const STAGE1_INSTRUCTION: &str = "Please help generate parameters of neural networks.";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("text of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} is not a byte")]
    NotAByte(u32),
    #[error("sequence of {len} positions ({instruction} instruction + {context} context + {special} special) exceeds max_seq_len {max}")]
    SequenceOverflow {
        len: usize,
        instruction: usize,
        context: usize,
        special: usize,
        max: usize,
    },
    #[error("projection head emits {got} values but the architecture needs {expected}")]
    HeadMismatch { expected: usize, got: usize },
    #[error("context mismatch: {0}")]
    Context(String),
    #[error("generator checkpoint: {0}")]
    File(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Grad(#[from] gradcore::GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GenError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    /// LoRA update is scaled by `lora_scale / lora_rank`.
    pub lora_scale: f64,
    pub patch_size: usize,
    /// Standard deviation for LoRA `A`, and for the final head layer of a
    /// head created by [`GeneratorState::retarget`].
    pub init_std: f64,
    /// Standard deviation for the special tokens `P`.
    pub p_init_std: f64,
    /// Standard deviation for the first head layer and the context embedder.
    pub head_init_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 1024,
            lora_rank: 8,
            lora_scale: 16.0,
            patch_size: 7,
            init_std: 0.02,
            p_init_std: 0.02,
            head_init_std: 0.02,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GenError::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("d_model, n_layers and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if self.patch_size == 0 || self.max_seq_len == 0 {
            return fail("patch_size and max_seq_len must be positive".into());
        }
        if !(self.init_std >= 0.0 && self.p_init_std >= 0.0 && self.head_init_std >= 0.0) || !self.lora_scale.is_finite() {
            return fail("init stds and lora_scale must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn lora_factor(&self) -> f64 {
        self.lora_scale / self.lora_rank as f64
    }

    /// Number of special tokens for a target of `param_len` weights.
    pub fn special_rows(&self, param_len: usize) -> usize {
        param_len.div_ceil(self.d_model)
    }
}

/// How data samples are turned into context embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContextEncoder {
    None,
    /// Non-overlapping `patch × patch` tiles, linearly embedded.
    Image { channels: usize, height: usize, width: usize },
    /// One linear embedding per feature vector.
    Vector { dim: usize },
    /// Mean of the decoder's frozen token embeddings over real tokens.
    Text,
}

impl ContextEncoder {
    pub fn for_samples(modality: Modality, sample_shape: &[usize]) -> Self {
        match (modality, sample_shape) {
            (Modality::Image, &[channels, height, width]) => ContextEncoder::Image { channels, height, width },
            (Modality::Vector, &[dim]) => ContextEncoder::Vector { dim },
            (Modality::Text, _) => ContextEncoder::Text,
            _ => ContextEncoder::None,
        }
    }

    /// Context embeddings produced per sample.
    pub fn tokens_per_sample(&self, patch: usize) -> usize {
        match *self {
            ContextEncoder::Image { height, width, .. } => (height / patch) * (width / patch),
            ContextEncoder::Vector { .. } | ContextEncoder::Text => 1,
            ContextEncoder::None => 0,
        }
    }

    fn input_width(&self, patch: usize) -> Option<usize> {
        match *self {
            ContextEncoder::Image { channels, .. } => Some(channels * patch * patch),
            ContextEncoder::Vector { dim } => Some(dim),
            _ => None,
        }
    }
}

/// The text a generation is conditioned on, with its byte tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    text: String,
    ids: Vec<u32>,
}

impl Instruction {
    pub fn new(text: &str, max_len: usize) -> Result<Self> {
        Ok(Self {
            text: text.to_string(),
            ids: tokenize(text, max_len)?,
        })
    }

    /// The generic instruction for corpus alignment.
    pub fn stage1(max_len: usize) -> Result<Self> {
        Self::new(STAGE1_INSTRUCTION, max_len)
    }

    /// Task instruction naming the architecture, task and dataset.
    pub fn for_task(arch_name: &str, task: &str, dataset: &str, max_len: usize) -> Result<Self> {
        Self::new(&task_instruction(arch_name, task, dataset), max_len)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

pub fn task_instruction(arch_name: &str, task: &str, dataset: &str) -> String {
    format!(
        "Please help generate parameters of the [{arch_name}] neural network to conduct the {task} task with the [{dataset}] data samples."
    )
}

/// Byte-level tokens of `text`.
pub fn tokenize(text: &str, max_len: usize) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(GenError::EmptyInstruction);
    }
    if text.len() > max_len {
        return Err(GenError::TooLong {
            len: text.len(),
            max: max_len,
        });
    }
    Ok(text.bytes().map(u32::from).collect())
}

pub fn detokenize(ids: &[u32]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| GenError::NotAByte(t)))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| GenError::Config(format!("tokens are not UTF-8: {e}")))
}

/// Positions of the three parts of the decoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub instruction: Range<usize>,
    pub context: Range<usize>,
    pub special: Range<usize>,
}

impl SequenceLayout {
    pub fn new(instruction: usize, context: usize, special: usize) -> Self {
        Self {
            instruction: 0..instruction,
            context: instruction..instruction + context,
            special: instruction + context..instruction + context + special,
        }
    }

    pub fn len(&self) -> usize {
        self.special.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `mask[i][j]` is true when position `i` may attend to position `j`.
    pub fn attention_mask(&self) -> Vec<Vec<bool>> {
        (0..self.len()).map(|i| (0..self.len()).map(|j| j <= i).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BaseBlock {
    pub ln1_gamma: Tensor<f32>,
    pub ln1_beta: Tensor<f32>,
    pub wq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub wo: Tensor<f32>,
    pub ln2_gamma: Tensor<f32>,
    pub ln2_beta: Tensor<f32>,
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

impl BaseBlock {
    fn tensors(&self) -> [&Tensor<f32>; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<f32>; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Frozen decoder weights.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BaseDecoder {
    pub token_embedding: Tensor<f32>,
    pub blocks: Vec<BaseBlock>,
    pub lnf_gamma: Tensor<f32>,
    pub lnf_beta: Tensor<f32>,
}

impl BaseDecoder {
    fn init(config: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let d = config.d_model;
        let hidden = 4 * d;
        let ones = || Tensor::full(&[d], 1.0f32);
        let lin = |out: usize, inp: usize, rng: &mut dyn rand::RngCore| gaussian(&[out, inp], (1.0 / inp as f64).sqrt(), rng);
        let token_embedding = gaussian(&[BYTE_VOCAB, d], 1.0, rng);
        let blocks = (0..config.n_layers)
            .map(|_| BaseBlock {
                ln1_gamma: ones(),
                ln1_beta: Tensor::zeros(&[d]),
                wq: lin(d, d, rng),
                wk: lin(d, d, rng),
                wv: lin(d, d, rng),
                wo: lin(d, d, rng),
                ln2_gamma: ones(),
                ln2_beta: Tensor::zeros(&[d]),
                w1: lin(hidden, d, rng),
                b1: Tensor::zeros(&[hidden]),
                w2: lin(d, hidden, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            token_embedding,
            blocks,
            lnf_gamma: ones(),
            lnf_beta: Tensor::zeros(&[d]),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor<f32>> {
        let mut out = vec![&self.token_embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.lnf_gamma);
        out.push(&self.lnf_beta);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = vec![&mut self.token_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out
    }
}

/// Low-rank adapters of one block: `q += s·(x Aᵀ) Bᵀ`, likewise for `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a_q: Tensor<f32>,
    pub b_q: Tensor<f32>,
    pub a_v: Tensor<f32>,
    pub b_v: Tensor<f32>,
}

/// Per-position head `d → d → d` and the learnable context encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
    /// Linear context embedder `[d, input]` and bias, when the encoder has one.
    pub embed: Option<(Tensor<f32>, Tensor<f32>)>,
}

/// Which target the head is currently sized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSizing {
    pub arch_id: u64,
    pub param_len: usize,
    pub special_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    config: GeneratorConfig,
    target: TargetSizing,
    encoder: ContextEncoder,
    pub(crate) base: BaseDecoder,
    pub p: Tensor<f32>,
    pub lora: Vec<LoraAdapter>,
    pub head: ProjectionHead,
}

impl GeneratorState {
    /// Fresh generator for `arch`: random frozen base, `P`, LoRA `A` and the
    /// first head layer drawn from zero-mean normals with their configured
    /// deviations, LoRA `B` and the final head layer zero.
    pub fn new(config: GeneratorConfig, arch: &ArchSpec, encoder: ContextEncoder) -> Result<Self> {
        config.validate()?;
        if let ContextEncoder::Image { height, width, .. } = encoder {
            if height % config.patch_size != 0 || width % config.patch_size != 0 {
                return Err(GenError::Context(format!(
                    "{height}x{width} images do not tile into {p}x{p} patches",
                    p = config.patch_size
                )));
            }
        }
        let base = BaseDecoder::init(&config, &mut stream_rng(config.seed, "generator/base"));
        let mut rng = stream_rng(config.seed, "generator/trainable");
        let (d, r, std) = (config.d_model, config.lora_rank, config.init_std);
        let target = TargetSizing {
            arch_id: arch.id(),
            param_len: arch.param_count(),
            special_rows: config.special_rows(arch.param_count()),
        };
        let p = gaussian(&[target.special_rows, d], config.p_init_std, &mut rng);
        let lora = (0..config.n_layers)
            .map(|_| LoraAdapter {
                a_q: gaussian(&[r, d], std, &mut rng),
                b_q: Tensor::zeros(&[d, r]),
                a_v: gaussian(&[r, d], std, &mut rng),
                b_v: Tensor::zeros(&[d, r]),
            })
            .collect();
        let head = fresh_head(&config, encoder, &mut rng);
        Ok(Self {
            config,
            target,
            encoder,
            base,
            p,
            lora,
            head,
        })
    }

    /// Correctly shaped state whose values are placeholders.
    pub(crate) fn skeleton(config: GeneratorConfig, target: TargetSizing, encoder: ContextEncoder) -> Self {
        let mut rng = crate::seed::rng(0);
        let (d, r) = (config.d_model, config.lora_rank);
        let lora = (0..config.n_layers)
            .map(|_| LoraAdapter {
                a_q: Tensor::zeros(&[r, d]),
                b_q: Tensor::zeros(&[d, r]),
                a_v: Tensor::zeros(&[r, d]),
                b_v: Tensor::zeros(&[d, r]),
            })
            .collect();
        Self {
            base: BaseDecoder::init(&config, &mut rng),
            p: Tensor::zeros(&[target.special_rows, d]),
            lora,
            head: fresh_head(&config, encoder, &mut rng),
            config,
            target,
            encoder,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn target(&self) -> TargetSizing {
        self.target
    }

    pub fn encoder(&self) -> ContextEncoder {
        self.encoder
    }

    /// Rejects architectures the head is not sized for.
    pub fn check_arch(&self, arch: &ArchSpec) -> Result<()> {
        if arch.param_count() != self.target.param_len {
            return Err(GenError::HeadMismatch {
                expected: arch.param_count(),
                got: self.target.param_len,
            });
        }
        if arch.id() != self.target.arch_id {
            return Err(ArchError::ArchMismatch {
                expected: arch.id(),
                found: self.target.arch_id,
            }
            .into());
        }
        Ok(())
    }

    /// The learnable tensors `{P, φ, θ}` in a fixed order with their names.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = vec![("P".to_string(), &self.p)];
        for (i, l) in self.lora.iter().enumerate() {
            out.push((format!("lora.{i}.a_q"), &l.a_q));
            out.push((format!("lora.{i}.b_q"), &l.b_q));
            out.push((format!("lora.{i}.a_v"), &l.a_v));
            out.push((format!("lora.{i}.b_v"), &l.b_v));
        }
        out.push(("head.w1".into(), &self.head.w1));
        out.push(("head.b1".into(), &self.head.b1));
        out.push(("head.w2".into(), &self.head.w2));
        out.push(("head.b2".into(), &self.head.b2));
        if let Some((w, b)) = &self.head.embed {
            out.push(("embed.w".into(), w));
            out.push(("embed.b".into(), b));
        }
        out
    }

    /// Mutable view of the learnable tensors, same order as
    /// [`Self::trainable_parameters`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = vec![&mut self.p];
        for l in &mut self.lora {
            out.extend([&mut l.a_q, &mut l.b_q, &mut l.a_v, &mut l.b_v]);
        }
        let h = &mut self.head;
        out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
        if let Some((w, b)) = &mut h.embed {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Hash of the frozen decoder weights.
    pub fn base_fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.base.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Frozen decoder token embeddings `[vocab, d_model]`.
    pub fn token_embedding(&self) -> &Tensor<f32> {
        &self.base.token_embedding
    }

    /// Resizes the head and special tokens for another architecture. `P`
    /// keeps its first rows; new rows and the head are drawn fresh. The new
    /// head's final layer is random rather than zero: an all-zero target net
    /// is a stationary point of the task loss and stage 2 cannot leave it.
    pub fn retarget(&mut self, arch: &ArchSpec, seed: u64) {
        let mut rng = stream_rng(seed, "generator/retarget");
        let d = self.config.d_model;
        let rows = self.config.special_rows(arch.param_count());
        let keep = rows.min(self.target.special_rows);
        let fresh = gaussian(&[rows, d], self.config.p_init_std, &mut rng);
        let mut data = self.p.data()[..keep * d].to_vec();
        data.extend_from_slice(&fresh.data()[keep * d..]);
        self.p = Tensor::new(&[rows, d], data).expect("sized special tokens");
        let embed = self.head.embed.take();
        self.head = fresh_head(&self.config, self.encoder, &mut rng);
        self.head.w2 = gaussian(&[d, d], self.config.init_std, &mut rng);
        self.head.embed = embed;
        self.target = TargetSizing {
            arch_id: arch.id(),
            param_len: arch.param_count(),
            special_rows: rows,
        };
    }

    /// Sequence layout for an instruction of `instruction` tokens and
    /// `samples` context samples, checked against `max_seq_len`.
    pub fn sequence_layout(&self, instruction: usize, samples: usize) -> Result<SequenceLayout> {
        let context = samples * self.encoder.tokens_per_sample(self.config.patch_size);
        let layout = SequenceLayout::new(instruction, context, self.target.special_rows);
        if layout.len() > self.config.max_seq_len {
            return Err(GenError::SequenceOverflow {
                len: layout.len(),
                instruction,
                context,
                special: self.target.special_rows,
                max: self.config.max_seq_len,
            });
        }
        Ok(layout)
    }

    /// Generates weights for `arch` without recording gradients.
    pub fn generate(&self, instruction: &Instruction, context: Option<&InputBatch>, arch: &ArchSpec) -> Result<FlatParams> {
        let mut g = gradcore::Graph::<f32>::new();
        let bound = Bound::constants(&mut g, self);
        let w = bound.generate(&mut g, self, instruction, context, arch)?;
        Ok(FlatParams::new(arch, g.value(w).data().to_vec())?)
    }

    /// Context embeddings `[tokens, d_model]` for a batch of samples.
    pub fn encode_context(&self, batch: &InputBatch) -> Result<Tensor<f32>> {
        let mut g = gradcore::Graph::<f32>::new();
        let bound = Bound::constants(&mut g, self);
        let e = bound.encode_context(&mut g, self, batch)?;
        Ok(g.value(e).clone())
    }
}

fn fresh_head(config: &GeneratorConfig, encoder: ContextEncoder, rng: &mut impl Rng) -> ProjectionHead {
    let (d, std) = (config.d_model, config.head_init_std);
    ProjectionHead {
        w1: gaussian(&[d, d], std, rng),
        b1: Tensor::zeros(&[d]),
        w2: Tensor::zeros(&[d, d]),
        b2: Tensor::zeros(&[d]),
        embed: encoder
            .input_width(config.patch_size)
            .map(|n| (gaussian(&[d, n], std, rng), Tensor::zeros(&[d]))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_arch, ArchKind};

    #[test]
    fn stage1_instruction_text() {
        let i = Instruction::stage1(1024).unwrap();
        assert_eq!(i.text(), "Please help generate parameters of neural networks.");
        assert_eq!(detokenize(i.ids()).unwrap(), i.text());
    }

    #[test]
    fn template_matches_worked_instance() {
        assert_eq!(
            task_instruction("MLP", "sentiment classification", "SST-2"),
            "Please help generate parameters of the [MLP] neural network to conduct the sentiment classification task with the [SST-2] data samples."
        );
    }

    #[test]
    fn tokenize_rejects_empty_and_long() {
        assert!(matches!(tokenize("", 10), Err(GenError::EmptyInstruction)));
        assert!(matches!(tokenize("abcdef", 5), Err(GenError::TooLong { len: 6, max: 5 })));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = GeneratorConfig {
            d_model: 30,
            n_heads: 4,
            ..GeneratorConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(GenError::Config(_))));
    }

    #[test]
    fn retarget_keeps_leading_rows() {
        let big = builtin_arch(ArchKind::Cnn3, &[1, 8, 8], 3).unwrap();
        let small = builtin_arch(ArchKind::Cnn2, &[1, 8, 8], 3).unwrap();
        let cfg = GeneratorConfig {
            d_model: 32,
            n_layers: 1,
            ..GeneratorConfig::default()
        };
        let mut g = GeneratorState::new(cfg, &big, ContextEncoder::None).unwrap();
        let before = g.p.clone();
        g.retarget(&small, 1);
        let rows = small.param_count().div_ceil(32);
        assert_eq!(g.p.shape(), [rows, 32]);
        assert_eq!(&g.p.data()[..rows * 32], &before.data()[..rows * 32]);
        assert!(g.head.w2.data().iter().any(|&v| v != 0.0));
        g.check_arch(&small).unwrap();
        assert!(g.check_arch(&big).is_err());
    }

    #[test]
    fn overflowing_sequence_is_rejected() {
        let arch = builtin_arch(ArchKind::Mlp, &[4], 2).unwrap();
        let cfg = GeneratorConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            max_seq_len: 40,
            ..GeneratorConfig::default()
        };
        let g = GeneratorState::new(cfg, &arch, ContextEncoder::Vector { dim: 4 }).unwrap();
        let rows = g.target().special_rows;
        assert!(g.sequence_layout(40 - rows, 0).is_ok());
        assert!(matches!(g.sequence_layout(40 - rows, 1), Err(GenError::SequenceOverflow { .. })));
    }
}
