//! Attention-sensitivity laboratory for seq2seq architecture variants.
//!
//! The crate covers four areas:
//!
//! - [`math`]: dense `f64` linear algebra, softmax, norms, seeded randomness
//!   and a central-difference Jacobian oracle.
//! - [`attention`] and [`jacobian`]: masked attention, partial attention, and
//!   closed-form Jacobians of attention outputs with respect to source rows.
//! - [`models`]: decoder-only (LM and its ablations, PALM), encoder-decoder
//!   (ED) and the regularized encoder-decoder (RED) forward passes with
//!   reverse-mode gradients, training and greedy decoding.
//! - [`data`]: synthetic seq2seq tasks, corpus files and generation metrics.

pub mod attention;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod jacobian;
pub mod math;
pub mod models;

pub use attention::{
    attend, make_causal_mask, make_cross_unidirectional_mask, make_prefix_mask, partial_attention_block,
    AttentionMask, AttentionWeights, PartialAttentionParams,
};
pub use data::{ParallelCorpus, ToyTaskSpec};
pub use error::{LabError, Result};
pub use jacobian::{AttentionMode, SensitivityConfig, SensitivityReport};
pub use math::{Matrix, NormKind, SeededRng};
pub use models::{LossBreakdown, Model, ModelConfig, ModelParams, Token, Variant, Vocab};
