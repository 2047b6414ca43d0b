//! Discrete-diffusion layout generation.
//!
//! A layout is a canvas plus a list of elements, each described by five
//! quantized attributes `(category, x, y, w, h)`. Every attribute is either
//! precise (a fixed condition), coarse (a noisy value to refine) or missing.
//! Generation, completion and refinement are all treated as reversing one
//! absorbing-state diffusion process over those attributes:
//!
//! - [`layout`]: domain types, quantization, tokenization, relations, JSON.
//! - [`diffusion`]: transition matrices, marginals, posteriors, corruption plans.
//! - [`numerics`]: a small reverse-mode autodiff substrate and AdamW.
//! - [`denoiser`]: the relation-biased transformer predicting clean values.
//! - [`training`]: the variational loss and the training loop.
//! - [`inference`]: task construction and confidence top-k decoding.
//! - [`eval`]: MaxIoU, alignment, overlap, FID and retention.
//! - [`data`]: corpus ingestion, splits and the synthetic layout generator.

pub mod ablation;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod inference;
pub mod layout;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
