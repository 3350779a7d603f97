//! Token-level multi-reference autoregressive image generation.
//!
//! The pipeline, end to end: a deterministic palette tokenizer maps images to
//! codebook token grids ([`tokenizer`]); a procedural scene generator builds
//! two-subject compositions with masks, prompts, and a similarity filter
//! ([`scene`], [`dataset`]); token sequences are laid out with per-source
//! index ids and an optional identity-disentanglement span ([`sequence`]); a
//! decoder-only transformer with rotary positions, additive index embeddings,
//! and learnable instruct tokens provides exact gradients and KV-cached
//! decoding ([`model`]); training combines next-token cross-entropy with a
//! feature distillation term under AdamW ([`training`]); generation,
//! metrics, and the ablation harness live in [`inference`] and [`eval`].

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod inference;
pub mod mat;
pub mod model;
pub mod ppm;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod sequence;
pub mod tokenizer;
pub mod training;

pub use error::{Result, TokenArError};
