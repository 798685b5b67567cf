//! depthlab — a desk-scale laboratory for depth stability in transformers.
//!
//! The crate builds small BERT-style encoders and GPT-style decoders on top
//! of its own reverse-mode autodiff engine and lets the residual
//! normalization rule be swapped per run: plain post-LN and pre-LN
//! baselines, DeepNorm-style alpha/beta scaling, upscale-LN (alpha-scaled
//! skip, unscaled branch weights), and foundation-LN (alpha fixed at 0.974
//! regardless of depth). Around the models sit the tools that make depth
//! experiments repeatable: deterministic byte-level data, Adam with warmup
//! schedules, bitwise-resumable checkpoints, per-layer gradient statistics,
//! and a sweep harness that tabulates divergence across depth, strategy, and
//! seed.
//!
//! The `book/` directory of the repository walks through each concept with
//! runnable examples; `cargo test` keeps those listings honest.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod model;
pub mod norms;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{count_params, estimate_flops, Arch, Model, ModelConfig};
pub use norms::{alpha_for, residual_combine, ArchRole, NormKind, NormStrategy};
pub use tensor::{Real, Tensor};
pub use train::{lr_at, perplexity, TrainConfig};
