//! Encoder architecture: token embedding, Pre-RMSNorm blocks with rotary
//! self-attention and SwiGLU feed-forward, final RMSNorm and an untied MLM
//! head.

mod config;
pub mod layers;
mod model;

pub use config::ModelConfig;
pub use layers::{attention_block, ffn_block, rmsnorm, rope_apply, swiglu_ffn, BlockVars};
pub use model::{BoundModel, EncoderInput, EncoderModel, LayerParams};
