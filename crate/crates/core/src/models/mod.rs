//! Transformer variants, losses, gradients, training and decoding.

mod checkpoint;
mod config;
mod decode;
mod forward;
mod loss;
mod network;
mod params;
mod tape;
mod train;

pub use config::{
    Architecture, LossScope, ModelConfig, ModelSpec, PositionalMode, SourceMask, Token, Variant, Vocab, NUM_SPECIALS,
};
pub use forward::{forward, forward_ed, forward_lm, forward_palm, forward_red, Logits};
pub use loss::{
    batch_loss, compute_loss, gradient_check, loss_and_gradients, GradientCheck, LossBreakdown, Pair,
    GRADIENT_CHECK_FLOOR, GRADIENT_CHECK_SAMPLES,
};
pub use network::Model;
pub use params::{Gradients, ModelParams, ParamId};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CONFIG_TENSOR, FORMAT_VERSION, MAGIC,
};
pub use decode::{argmax, decode_all, greedy_decode};
pub use train::{loss_log_csv, train, train_model, Adam, EpochLog, TrainConfig, TrainOutcome, LOSS_LOG_HEADER};
