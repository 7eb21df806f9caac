//! Instruction-conditioned generation of small-network weights.
//!
//! A frozen, randomly initialized transformer decoder reads an instruction,
//! an optional batch of task samples, and a bank of learnable special tokens.
//! The hidden states at the special-token positions are projected into the
//! flat parameter vector of a target network, which is then executed
//! functionally. Training runs in two stages: alignment against a corpus of
//! classically trained checkpoints, then task-loss tuning on sampled data.

pub mod arch;
mod binio;
pub mod data;
pub mod generator;
pub mod refcorpus;
pub mod seed;
pub mod training;
