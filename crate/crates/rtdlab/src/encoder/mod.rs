//! Transformer encoder with standard or disentangled attention, plus the
//! embedding gather and the MLM/RTD output heads.
//!
//! Blocks are pre-layer-norm residual: h + Attn(LN(h)), then h + FFN(LN(h)).
//! There is no final layer norm, so a zero-layer encoder is the identity on
//! its input embeddings. Absolute positions enter as a learned table added
//! to the token embeddings before the first block.

mod attention;
mod config;
mod forward;
mod heads;
mod params;


pub use attention::{attention_forward, attention_mask_bias, default_scale};
pub use config::{expected_generator_depth, AttentionMode, EncoderConfig};
pub use forward::{embed, embed_with_positions, encoder_forward};
pub use heads::{MlmHead, RtdHead};
pub use params::{const_param, gaussian_param, BodyParams, EncoderParams, LayerParams, INIT_STD, LN_EPS};
