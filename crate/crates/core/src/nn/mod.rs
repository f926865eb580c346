//! Transformer building blocks, positional encodings, prediction heads and the
//! small multi-scale CNN backbone.

pub mod backbone;
pub mod config;
pub mod encoding;
pub mod layers;
pub mod params;
pub mod transformer;

pub use backbone::Backbone;
pub use config::{ConfigError, GridConvention, ModelConfig, Variant};
pub use encoding::{positional_encoding_2d, PositionFrame};
pub use layers::{Blocks, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use params::{Ctx, Param, ParamGroup, ParamStore};
pub use transformer::{Decoder, Encoder, HeadKind, HeadOutput, PredictionHeads, SetPrediction, SetTransformer, SetTransformerSpec};
