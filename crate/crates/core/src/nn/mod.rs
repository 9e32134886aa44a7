//! Transformer building blocks and parameter management.

mod layers;
mod params;

pub use layers::{sinusoidal_pe, DecoderBlock, EncoderBlock, FeedForward, LayerNorm, Linear, MlpHead, MultiHeadAttention, LN_EPS};
pub use params::{Bound, Init, ParamId, ParamStore, Scheme};
