//! Reverse-mode autodiff over dense row-major tensors, AdamW, and seeded
//! random streams.
//!
//! The op set is deliberately small: exactly what the denoiser and the FID
//! feature model need, with attention, layer normalization and the
//! per-row losses fused into single tape entries.

mod gradcheck;
mod graph;
mod optim;
mod real;
pub mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{softmax_in_place, AttnSegment, AttnSpec, Gradients, Graph, ParamId, ParamStore, Var};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use real::Real;
pub use rng::{derive_seed, sample_categorical, seeded_rng};
pub use tensor::Tensor;
