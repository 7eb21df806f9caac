//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records kernels as they execute and replays them backwards to
//! produce gradients for every trainable leaf. The kernel set is deliberately
//! closed (see [`KernelKind`]); each kernel has a hand-written backward rule
//! that is verified against central differences in the test suite.
//!
//! ```
//! use gradcore::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
//! let y = g.relu(x).unwrap();
//! let loss = g.apply(gradcore::Kernel::SumReduce, &[y]).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
//! ```

mod check;
mod error;
mod graph;
mod kernel;
mod scalar;
mod tensor;

pub use check::{grad_check, grad_check_coords, GradCheckReport};
pub use error::{GradError, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernel::{Kernel, KernelKind};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
