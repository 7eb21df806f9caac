//! Graph construction for one generation pass.

use gradcore::{Graph, Kernel, Scalar, Tensor, Var};

use super::{ContextEncoder, GenError, GeneratorState, Instruction, Result};
use crate::arch::{token_lengths, ArchSpec, InputBatch};

struct BlockVars {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Graph handles for one generator state. The learnable handles are public
/// so callers can read gradients or substitute their own values.
pub struct Bound {
    pub p: Var,
    /// Per block: `[a_q, b_q, a_v, b_v]`.
    pub lora: Vec<[Var; 4]>,
    /// `[w1, b1, w2, b2]`.
    pub head: [Var; 4],
    pub embed: Option<(Var, Var)>,
    token_embedding: Var,
    blocks: Vec<BlockVars>,
    lnf: (Var, Var),
    /// Apply the LoRA updates; off reproduces the frozen base exactly.
    pub use_lora: bool,
}

impl Bound {
    /// Binds the learnable tensors as gradient-receiving leaves.
    pub fn leaves<T: Scalar>(g: &mut Graph<T>, state: &GeneratorState) -> Self {
        Self::bind(g, state, true)
    }

    /// Binds everything as constants (plain evaluation).
    pub fn constants<T: Scalar>(g: &mut Graph<T>, state: &GeneratorState) -> Self {
        Self::bind(g, state, false)
    }

    fn bind<T: Scalar>(g: &mut Graph<T>, state: &GeneratorState, trainable: bool) -> Self {
        let learn = |g: &mut Graph<T>, t: &Tensor<f32>| {
            if trainable {
                g.leaf(t.cast())
            } else {
                g.constant(t.cast())
            }
        };
        let p = learn(g, &state.p);
        let lora = state
            .lora
            .iter()
            .map(|l| [learn(g, &l.a_q), learn(g, &l.b_q), learn(g, &l.a_v), learn(g, &l.b_v)])
            .collect();
        let h = &state.head;
        let head = [learn(g, &h.w1), learn(g, &h.b1), learn(g, &h.w2), learn(g, &h.b2)];
        let embed = h.embed.as_ref().map(|(w, b)| (learn(g, w), learn(g, b)));
        let base = &state.base;
        let mut frozen = |t: &Tensor<f32>| g.constant(t.cast());
        let token_embedding = frozen(&base.token_embedding);
        let blocks = base
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: (frozen(&b.ln1_gamma), frozen(&b.ln1_beta)),
                wq: frozen(&b.wq),
                wk: frozen(&b.wk),
                wv: frozen(&b.wv),
                wo: frozen(&b.wo),
                ln2: (frozen(&b.ln2_gamma), frozen(&b.ln2_beta)),
                w1: frozen(&b.w1),
                b1: frozen(&b.b1),
                w2: frozen(&b.w2),
                b2: frozen(&b.b2),
            })
            .collect();
        let lnf = (frozen(&base.lnf_gamma), frozen(&base.lnf_beta));
        Self {
            p,
            lora,
            head,
            embed,
            token_embedding,
            blocks,
            lnf,
            use_lora: true,
        }
    }

    /// Learnable handles in the order of
    /// [`GeneratorState::trainable_parameters`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = vec![self.p];
        for l in &self.lora {
            out.extend(l);
        }
        out.extend(self.head);
        if let Some((w, b)) = self.embed {
            out.extend([w, b]);
        }
        out
    }

    /// Context embeddings `[tokens, d_model]`, samples in batch order.
    pub fn encode_context<T: Scalar>(&self, g: &mut Graph<T>, state: &GeneratorState, batch: &InputBatch) -> Result<Var> {
        let n = batch.batch_size();
        if n == 0 {
            return Err(GenError::Context("empty context batch".into()));
        }
        match (state.encoder(), batch) {
            (ContextEncoder::Image { channels, height, width }, InputBatch::Dense(x)) => {
                if x.shape() != [n, channels, height, width] {
                    return Err(GenError::Context(format!(
                        "expected images [{n}, {channels}, {height}, {width}], got {:?}",
                        x.shape()
                    )));
                }
                let p = state.config().patch_size;
                let (gh, gw) = (height / p, width / p);
                let width_in = channels * p * p;
                let mut patches = Vec::with_capacity(n * gh * gw * width_in);
                for s in 0..n {
                    for pi in 0..gh {
                        for pj in 0..gw {
                            for c in 0..channels {
                                for di in 0..p {
                                    let row = ((s * channels + c) * height + pi * p + di) * width + pj * p;
                                    patches.extend(x.data()[row..row + p].iter().map(|&v| T::from_f32(v).unwrap()));
                                }
                            }
                        }
                    }
                }
                let patches = g.constant(Tensor::new(&[n * gh * gw, width_in], patches)?);
                let (w, b) = self.embed.expect("image encoder has an embedder");
                Ok(g.linear(patches, w, Some(b))?)
            }
            (ContextEncoder::Vector { dim }, InputBatch::Dense(x)) => {
                if x.shape() != [n, dim] {
                    return Err(GenError::Context(format!("expected vectors [{n}, {dim}], got {:?}", x.shape())));
                }
                let x = g.constant(x.cast());
                let (w, b) = self.embed.expect("vector encoder has an embedder");
                Ok(g.linear(x, w, Some(b))?)
            }
            (ContextEncoder::Text, InputBatch::Tokens { ids, batch, len }) => {
                let lengths = token_lengths(ids, *batch, *len);
                let vocab = state.token_embedding().shape()[0];
                let mut pool = vec![T::zero(); n * vocab];
                for s in 0..n {
                    let inv = T::one() / T::from_usize(lengths[s].max(1)).unwrap();
                    for &t in &ids[s * len..(s + 1) * len] {
                        if t != crate::arch::PAD_ID {
                            pool[s * vocab + t as usize] += inv;
                        }
                    }
                }
                let pool = g.constant(Tensor::new(&[n, vocab], pool)?);
                Ok(g.matmul(pool, self.token_embedding)?)
            }
            (enc, _) => Err(GenError::Context(format!("encoder {enc:?} cannot embed this batch"))),
        }
    }

    /// Final hidden states `[len, d_model]` for an embedded input sequence.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, state: &GeneratorState, x: Var) -> Result<Var> {
        let cfg = state.config();
        let len = g.value(x).shape()[0];
        let pos = g.constant(positional_encoding(len, cfg.d_model));
        let mut x = g.add(x, pos)?;
        let factor = T::from_f64(cfg.lora_factor()).unwrap();
        for (b, l) in self.blocks.iter().zip(&self.lora) {
            let h = layer_norm(g, x, b.ln1)?;
            let mut q = g.matmul_t(h, b.wq)?;
            let k = g.matmul_t(h, b.wk)?;
            let mut v = g.matmul_t(h, b.wv)?;
            if self.use_lora {
                q = lora_update(g, h, q, l[0], l[1], factor)?;
                v = lora_update(g, h, v, l[2], l[3], factor)?;
            }
            let a = g.apply(
                Kernel::ScaledDotAttention {
                    n_heads: cfg.n_heads,
                    causal: true,
                },
                &[q, k, v],
            )?;
            let a = g.matmul_t(a, b.wo)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, x, b.ln2)?;
            let m = g.linear(h, b.w1, Some(b.b1))?;
            let m = g.relu(m)?;
            let m = g.linear(m, b.w2, Some(b.b2))?;
            x = g.add(x, m)?;
        }
        layer_norm(g, x, self.lnf)
    }

    /// `w_g` as a rank-1 value of length `|w|`.
    pub fn generate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        state: &GeneratorState,
        instruction: &Instruction,
        context: Option<&InputBatch>,
        arch: &ArchSpec,
    ) -> Result<Var> {
        state.check_arch(arch)?;
        let samples = context.map_or(0, |c| c.batch_size());
        let layout = state.sequence_layout(instruction.ids().len(), samples)?;
        let ids: Vec<usize> = instruction.ids().iter().map(|&t| t as usize).collect();
        let mut parts = vec![g.apply(Kernel::EmbeddingLookup { ids }, &[self.token_embedding])?];
        if let Some(c) = context {
            parts.push(self.encode_context(g, state, c)?);
        }
        parts.push(self.p);
        let seq = g.concat(&parts)?;
        let hidden = self.decode(g, state, seq)?;
        let h_g = g.rows(hidden, layout.special.start, layout.special.end)?;
        let [w1, b1, w2, b2] = self.head;
        let y = g.linear(h_g, w1, Some(b1))?;
        let y = g.relu(y)?;
        let y = g.linear(y, w2, Some(b2))?;
        let rows = layout.special.len() * state.config().d_model;
        let flat = g.reshape(y, &[rows])?;
        Ok(g.rows(flat, 0, arch.param_count())?)
    }
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, (gamma, beta): (Var, Var)) -> Result<Var> {
    Ok(g.apply(Kernel::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])?)
}

fn lora_update<T: Scalar>(g: &mut Graph<T>, h: Var, base: Var, a: Var, b: Var, factor: T) -> Result<Var> {
    let low = g.matmul_t(h, a)?;
    let up = g.matmul_t(low, b)?;
    let up = g.scale(up, factor)?;
    Ok(g.add(base, up)?)
}

/// Sinusoidal position table `[len, d]`.
pub(crate) fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data.push(T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }).unwrap());
        }
    }
    Tensor::new(&[len, d], data).expect("sized table")
}
