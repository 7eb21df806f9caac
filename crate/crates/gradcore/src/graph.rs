use crate::error::{GradError, Result};
use crate::kernel::{self, Kernel, KernelKind, Saved};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Record<T> {
    kernel: Kernel,
    inputs: Vec<Var>,
    saved: Saved<T>,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    record: Option<Record<T>>,
}

/// Gradient tape. Operations are appended in execution order; the tape is
/// single-use: one [`Graph::backward`] call consumes it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, record: Option<Record<T>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Frozen value: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of operations recorded for differentiation.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    pub fn apply(&mut self, kernel: Kernel, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(GradError::TapeConsumed);
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(GradError::ForeignVar(bad.0));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, saved) = kernel::forward(&kernel, &values)?;
        if cfg!(debug_assertions) && values.iter().all(|t| t.is_finite()) && !out.is_finite() {
            return Err(GradError::NonFinite { kind: kernel.kind() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            kernel,
            inputs: inputs.to_vec(),
            saved,
        });
        Ok(self.push(out, requires_grad, record))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(GradError::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(GradError::ForeignVar(loss.0));
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GradError::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(shape, T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(record) = self.nodes[idx].record.as_ref() else { continue };
            let Some(upstream) = grads[idx].take() else { continue };
            let values: Vec<&Tensor<T>> = record.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = record.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let local = kernel::backward(
                &record.kernel,
                &values,
                &self.nodes[idx].value,
                &record.saved,
                &upstream,
                &needs,
            );
            for (input, g) in record.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match grads[input.0].as_mut() {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => grads[input.0] = Some(g),
                }
            }
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let leaf = node.requires_grad && node.record.is_none();
            out.push(if leaf {
                Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
            } else {
                None
            });
        }
        Ok(Gradients { grads: out })
    }

    // Convenience wrappers for the kernels used most often.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Matmul { trans_a: false, trans_b: false }, &[a, b])
    }

    /// `a · bᵀ`, the usual `x · Wᵀ` of a linear layer with `W: [out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Matmul { trans_a: false, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Mul, &[a, b])
    }

    /// Multiply by a constant factor.
    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let c = self.constant(Tensor::full(self.value(a).shape(), factor));
        self.mul(a, c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Kernel::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Kernel::Tanh, &[a])
    }

    /// `x · Wᵀ + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Kernel::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Kernel::SliceView { start, end }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Kernel::Concat, parts)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Mse, &[a, b])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(Kernel::CrossEntropy { labels: labels.to_vec() }, &[logits])
    }

    pub fn kind_of(&self, v: Var) -> Option<KernelKind> {
        self.nodes[v.0].record.as_ref().map(|r| r.kernel.kind())
    }
}

/// Gradients of every trainable leaf, produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for constants and intermediates.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves covered.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
