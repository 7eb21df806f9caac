//! Target-network descriptions.
//!
//! An [`ArchSpec`] is an ordered list of layers over a fixed input shape. Shape
//! inference runs at construction and produces the [`ParamLayout`]: the
//! canonical order in which every trainable tensor sits inside one flat
//! parameter vector (layer order, weight before recurrent before bias).

mod file;
mod forward;
mod layout;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use file::{decode_weights, encode_weights, read_weights, write_weights, WEIGHTS_MAGIC};
pub use forward::{forward_logits, functional_forward, predict, FrozenTables, InputBatch};
pub(crate) use forward::{argmax_rows, gaussian, token_lengths};
pub use layout::{flatten, slice, FlatParams, ParamLayout, Segment, TensorRole};

/// Byte-level vocabulary: 256 byte ids plus one padding id.
pub const BYTE_VOCAB: usize = 257;
pub const PAD_ID: u32 = 256;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("{arch}: shape inference failed at layer {layer} ({desc}): {reason}")]
    Shape {
        arch: String,
        layer: usize,
        desc: String,
        reason: String,
    },
    #[error("{arch}: network ends in {got} instead of [{classes}] logits")]
    Output { arch: String, got: String, classes: usize },
    #[error("{kind} expects input of rank {expected}, got {got:?}")]
    InputRank { kind: ArchKind, expected: usize, got: Vec<usize> },
    #[error("segment {index} ({role:?} of layer {layer}): expected shape {expected:?}, got {got:?}")]
    SegmentShape {
        index: usize,
        layer: usize,
        role: TensorRole,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} tensors in layout order, got {got}")]
    SegmentCount { expected: usize, got: usize },
    #[error("flat vector has {got} values, layout needs {expected} (first short segment: {first_segment})")]
    Length {
        expected: usize,
        got: usize,
        first_segment: usize,
    },
    #[error("parameter {index} is not finite ({value})")]
    NonFinite { index: usize, value: f32 },
    #[error("weights belong to architecture {found:016x}, expected {expected:016x}")]
    ArchMismatch { expected: u64, found: u64 },
    #[error("batch shape {got:?} does not match input shape {expected:?}")]
    BatchShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("no frozen table for embedding layer {0}")]
    MissingTable(usize),
    #[error("weights file: {0}")]
    File(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grad(#[from] gradcore::GradError),
}

pub type Result<T, E = ArchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// Three [conv-ReLU-pool] blocks, global average pooling, linear head.
    Cnn3,
    /// Two [conv-ReLU-pool] blocks, global average pooling, linear head.
    Cnn2,
    Lenet,
    /// Dense-vector MLP (synthetic feature data).
    Mlp,
    /// Mean-pooled frozen token embeddings into an MLP.
    MlpText,
    /// Single-layer tanh RNN over frozen token embeddings.
    RnnText,
}

impl ArchKind {
    pub fn display_name(self) -> &'static str {
        match self {
            ArchKind::Cnn3 | ArchKind::Cnn2 => "CNN",
            ArchKind::Lenet => "LeNet",
            ArchKind::Mlp | ArchKind::MlpText => "MLP",
            ArchKind::RnnText => "RNN",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum serializes");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        k: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        out_features: usize,
    },
    EmbeddingRef {
        vocab: usize,
        dim: usize,
        frozen: bool,
    },
    MeanPoolTokens,
    RnnVanilla {
        hidden: usize,
    },
    TakeLastHidden,
}

/// Shape of the activation flowing between layers (batch dimension omitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation {
    Image { c: usize, h: usize, w: usize },
    Tokens { len: usize },
    Sequence { len: usize, dim: usize },
    RnnState { hidden: usize },
    Vector { dim: usize },
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Image { c, h, w } => write!(f, "image [{c}, {h}, {w}]"),
            Activation::Tokens { len } => write!(f, "tokens [{len}]"),
            Activation::Sequence { len, dim } => write!(f, "sequence [{len}, {dim}]"),
            Activation::RnnState { hidden } => write!(f, "rnn states [{hidden}]"),
            Activation::Vector { dim } => write!(f, "vector [{dim}]"),
        }
    }
}

/// Optional width overrides for the builtin architectures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    /// Conv channels per block (cnn3: 3 entries, cnn2: 2).
    pub channels: Option<Vec<usize>>,
    /// Hidden width of mlp / mlp_text / rnn_text.
    pub hidden: Option<usize>,
    /// Frozen embedding width for the text kinds.
    pub embed_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub kind: ArchKind,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(skip)]
    layout: ParamLayout,
    #[serde(skip)]
    id: u64,
}

impl ArchSpec {
    /// Validates the layer stack and infers the parameter layout.
    pub fn new(
        name: impl Into<String>,
        kind: ArchKind,
        input_shape: Vec<usize>,
        num_classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let mut spec = Self {
            name: name.into(),
            kind,
            input_shape,
            num_classes,
            layers,
            layout: ParamLayout::default(),
            id: 0,
        };
        spec.layout = spec.infer_layout()?;
        spec.id = spec.compute_id();
        Ok(spec)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Number of trainable parameters |w|.
    pub fn param_count(&self) -> usize {
        self.layout.total_len
    }

    /// Stable hash of the architecture, stamped into every weights artifact.
    pub fn id(&self) -> u64 {
        self.id
    }

    fn compute_id(&self) -> u64 {
        let canonical = serde_json::to_vec(self).expect("arch spec serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().expect("digest holds 8 bytes"))
    }

    pub(crate) fn input_activation(&self) -> Result<Activation> {
        let starts_with_embedding = matches!(self.layers.first(), Some(LayerSpec::EmbeddingRef { .. }));
        match (self.input_shape.as_slice(), starts_with_embedding) {
            (&[c, h, w], false) => Ok(Activation::Image { c, h, w }),
            (&[len], true) => Ok(Activation::Tokens { len }),
            (&[dim], false) => Ok(Activation::Vector { dim }),
            _ => Err(ArchError::InputRank {
                kind: self.kind,
                expected: if starts_with_embedding { 1 } else { 3 },
                got: self.input_shape.clone(),
            }),
        }
    }

    /// Walks the layers, returning the activation after each one.
    pub(crate) fn activations(&self) -> Result<Vec<Activation>> {
        let mut act = self.input_activation()?;
        if act.numel() == 0 {
            return Err(self.shape_err(0, "input has a zero-sized dimension"));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            act = match (layer, act) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Activation::Image { h, w, .. },
                ) => {
                    if *stride == 0 || *kernel == 0 || *out_channels == 0 {
                        return Err(self.shape_err(i, "kernel, stride and channels must be positive"));
                    }
                    let side = |s: usize| (s + 2 * padding).checked_sub(*kernel).map(|r| r / stride + 1);
                    match (side(h), side(w)) {
                        (Some(h), Some(w)) => Activation::Image { c: *out_channels, h, w },
                        _ => return Err(self.shape_err(i, format!("kernel {kernel} larger than padded input"))),
                    }
                }
                (LayerSpec::Relu, a @ (Activation::Image { .. } | Activation::Vector { .. })) => a,
                (LayerSpec::MaxPool2d { k }, Activation::Image { c, h, w }) => {
                    if *k == 0 || h / k == 0 || w / k == 0 {
                        return Err(self.shape_err(i, format!("pooling {h}x{w} by {k} leaves no spatial extent")));
                    }
                    Activation::Image { c, h: h / k, w: w / k }
                }
                (LayerSpec::GlobalAvgPool, Activation::Image { c, .. }) => Activation::Vector { dim: c },
                (LayerSpec::Flatten, Activation::Image { c, h, w }) => Activation::Vector { dim: c * h * w },
                (LayerSpec::Linear { out_features }, Activation::Vector { .. }) if *out_features > 0 => {
                    Activation::Vector { dim: *out_features }
                }
                (LayerSpec::EmbeddingRef { dim, vocab, .. }, Activation::Tokens { len }) if *dim > 0 && *vocab > 0 => {
                    Activation::Sequence { len, dim: *dim }
                }
                (LayerSpec::MeanPoolTokens, Activation::Sequence { dim, .. }) => Activation::Vector { dim },
                (LayerSpec::RnnVanilla { hidden }, Activation::Sequence { .. }) if *hidden > 0 => {
                    Activation::RnnState { hidden: *hidden }
                }
                (LayerSpec::TakeLastHidden, Activation::RnnState { hidden }) => Activation::Vector { dim: hidden },
                (_, a) => return Err(self.shape_err(i, format!("cannot apply to {a}"))),
            };
            out.push(act);
        }
        Ok(out)
    }

    fn shape_err(&self, layer: usize, reason: impl Into<String>) -> ArchError {
        ArchError::Shape {
            arch: self.name.clone(),
            layer,
            desc: self
                .layers
                .get(layer)
                .map(|l| format!("{l:?}"))
                .unwrap_or_else(|| "input".into()),
            reason: reason.into(),
        }
    }

    fn infer_layout(&self) -> Result<ParamLayout> {
        let acts = self.activations()?;
        match acts.last() {
            Some(Activation::Vector { dim }) if *dim == self.num_classes && self.num_classes > 0 => {}
            other => {
                return Err(ArchError::Output {
                    arch: self.name.clone(),
                    got: other.map(|a| a.to_string()).unwrap_or_else(|| "nothing".into()),
                    classes: self.num_classes,
                })
            }
        }
        let mut prev = self.input_activation()?;
        let mut layout = ParamLayout::default();
        for (i, (layer, act)) in self.layers.iter().zip(&acts).enumerate() {
            match (layer, prev) {
                (LayerSpec::Conv2d { out_channels, kernel, .. }, Activation::Image { c, .. }) => {
                    layout.push(i, TensorRole::Weight, vec![*out_channels, c, *kernel, *kernel]);
                    layout.push(i, TensorRole::Bias, vec![*out_channels]);
                }
                (LayerSpec::Linear { out_features }, Activation::Vector { dim }) => {
                    layout.push(i, TensorRole::Weight, vec![*out_features, dim]);
                    layout.push(i, TensorRole::Bias, vec![*out_features]);
                }
                (LayerSpec::EmbeddingRef { vocab, dim, frozen: false }, _) => {
                    layout.push(i, TensorRole::Weight, vec![*vocab, *dim]);
                }
                (LayerSpec::RnnVanilla { hidden }, Activation::Sequence { dim, .. }) => {
                    layout.push(i, TensorRole::Weight, vec![*hidden, dim]);
                    layout.push(i, TensorRole::Recurrent, vec![*hidden, *hidden]);
                    layout.push(i, TensorRole::Bias, vec![*hidden]);
                }
                _ => {}
            }
            prev = *act;
        }
        Ok(layout)
    }

    /// Layers whose frozen embedding table is supplied from outside the
    /// parameter vector, with their `(vocab, dim)`.
    pub fn frozen_embeddings(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::EmbeddingRef { vocab, dim, frozen: true } => Some((i, *vocab, *dim)),
                _ => None,
            })
            .collect()
    }
}

impl Activation {
    fn numel(&self) -> usize {
        match *self {
            Activation::Image { c, h, w } => c * h * w,
            Activation::Tokens { len } => len,
            Activation::Sequence { len, dim } => len * dim,
            Activation::RnnState { hidden } => hidden,
            Activation::Vector { dim } => dim,
        }
    }
}

fn conv_block(out_channels: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::Conv2d {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { k: 2 },
    ]
}

/// Builtin architecture with default widths.
pub fn builtin_arch(kind: ArchKind, input_shape: &[usize], num_classes: usize) -> Result<ArchSpec> {
    builtin_arch_with(kind, input_shape, num_classes, &Widths::default())
}

pub fn builtin_arch_with(kind: ArchKind, input_shape: &[usize], num_classes: usize, widths: &Widths) -> Result<ArchSpec> {
    let rank = match kind {
        ArchKind::Cnn3 | ArchKind::Cnn2 | ArchKind::Lenet => 3,
        _ => 1,
    };
    if input_shape.len() != rank {
        return Err(ArchError::InputRank {
            kind,
            expected: rank,
            got: input_shape.to_vec(),
        });
    }
    let hidden = widths.hidden.unwrap_or(64);
    let embed_dim = widths.embed_dim.unwrap_or(32);
    let layers: Vec<LayerSpec> = match kind {
        ArchKind::Cnn3 | ArchKind::Cnn2 => {
            let default: &[usize] = if kind == ArchKind::Cnn3 { &[8, 16, 32] } else { &[8, 16] };
            let channels = widths.channels.clone().unwrap_or_else(|| default.to_vec());
            let blocks = if kind == ArchKind::Cnn3 { 3 } else { 2 };
            if channels.len() != blocks {
                return Err(ArchError::Shape {
                    arch: kind.to_string(),
                    layer: 0,
                    desc: "channels".into(),
                    reason: format!("{kind} needs {blocks} channel widths, got {}", channels.len()),
                });
            }
            let mut layers: Vec<LayerSpec> = channels.iter().flat_map(|&c| conv_block(c)).collect();
            layers.push(LayerSpec::GlobalAvgPool);
            layers.push(LayerSpec::Linear {
                out_features: num_classes,
            });
            layers
        }
        ArchKind::Lenet => vec![
            LayerSpec::Conv2d {
                out_channels: 6,
                kernel: 5,
                stride: 1,
                padding: 2,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { k: 2 },
            LayerSpec::Conv2d {
                out_channels: 16,
                kernel: 5,
                stride: 1,
                padding: 0,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { k: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { out_features: 120 },
            LayerSpec::Relu,
            LayerSpec::Linear { out_features: 84 },
            LayerSpec::Relu,
            LayerSpec::Linear {
                out_features: num_classes,
            },
        ],
        ArchKind::Mlp => vec![
            LayerSpec::Linear { out_features: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear {
                out_features: num_classes,
            },
        ],
        ArchKind::MlpText => vec![
            LayerSpec::EmbeddingRef {
                vocab: BYTE_VOCAB,
                dim: embed_dim,
                frozen: true,
            },
            LayerSpec::MeanPoolTokens,
            LayerSpec::Linear { out_features: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear {
                out_features: num_classes,
            },
        ],
        ArchKind::RnnText => vec![
            LayerSpec::EmbeddingRef {
                vocab: BYTE_VOCAB,
                dim: embed_dim,
                frozen: true,
            },
            LayerSpec::RnnVanilla { hidden },
            LayerSpec::TakeLastHidden,
            LayerSpec::Linear {
                out_features: num_classes,
            },
        ],
    };
    ArchSpec::new(kind.to_string(), kind, input_shape.to_vec(), num_classes, layers)
}
