//! Post-norm transformer encoder/decoder with per-layer prediction heads.

use super::layers::{Blocks, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::params::{Ctx, ParamGroup, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};
use rand::Rng;

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, ffn: usize, n_layers: usize, rng: &mut impl Rng) -> std::result::Result<Encoder, TensorError> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("{prefix}.{i}");
            layers.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn, d, rng),
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
            });
        }
        Ok(Encoder { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Contextualizes `[batch·n × d]` tokens that already carry their positional encoding.
    pub fn forward(&self, ctx: &Ctx, tokens: &Tensor, blocks: Blocks) -> Result<Tensor> {
        let mut x = tokens.clone();
        for layer in &self.layers {
            let a = layer.attn.forward(ctx, &x, &x, &x, blocks)?;
            x = layer.ln1.forward(ctx, &x.add(&a)?)?;
            let f = layer.ffn.forward(ctx, &x)?;
            x = layer.ln2.forward(ctx, &x.add(&f)?)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, ffn: usize, n_layers: usize, rng: &mut impl Rng) -> std::result::Result<Decoder, TensorError> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("{prefix}.{i}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn, d, rng),
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d),
            });
        }
        Ok(Decoder { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Refines all queries in parallel; returns the state after every layer.
    ///
    /// `queries` is `[batch·q × d]`, `memory` is `[batch·n × d]`.
    pub fn forward(&self, ctx: &Ctx, queries: &Tensor, memory: &Tensor, batch: usize) -> Result<Vec<Tensor>> {
        let q = queries.shape()[0] / batch.max(1);
        let n = memory.shape()[0] / batch.max(1);
        let self_blocks = Blocks {
            batch,
            q_len: q,
            kv_len: q,
        };
        let cross_blocks = Blocks {
            batch,
            q_len: q,
            kv_len: n,
        };
        let mut h = queries.clone();
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.self_attn.forward(ctx, &h, &h, &h, self_blocks)?;
            h = layer.ln1.forward(ctx, &h.add(&a)?)?;
            let c = layer.cross_attn.forward(ctx, &h, memory, memory, cross_blocks)?;
            h = layer.ln2.forward(ctx, &h.add(&c)?)?;
            let f = layer.ffn.forward(ctx, &h)?;
            h = layer.ln3.forward(ctx, &h.add(&f)?)?;
            states.push(h.clone());
        }
        Ok(states)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Person vs background, box as (cx, cy, w, h).
    Person,
    /// `joints` classes plus background, point as (x, y).
    Keypoint { joints: usize },
}

impl HeadKind {
    pub fn n_classes(&self) -> usize {
        match self {
            HeadKind::Person => 2,
            HeadKind::Keypoint { joints } => joints + 1,
        }
    }

    pub fn n_coords(&self) -> usize {
        match self {
            HeadKind::Person => 4,
            HeadKind::Keypoint { .. } => 2,
        }
    }

    /// Index of the background class (always last).
    pub fn background(&self) -> usize {
        self.n_classes() - 1
    }
}

/// Per-query class logits and squashed coordinates.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `[rows × n_classes]`, unnormalized.
    pub logits: Tensor,
    /// `[rows × n_coords]`, each in (0, 1).
    pub coords: Tensor,
}

#[derive(Debug, Clone)]
pub struct PredictionHeads {
    class: Linear,
    coord: FeedForward,
    kind: HeadKind,
}

impl PredictionHeads {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, kind: HeadKind, rng: &mut impl Rng) -> PredictionHeads {
        PredictionHeads {
            class: Linear::new(store, &format!("{prefix}.class"), d, kind.n_classes(), ParamGroup::Transformer, rng),
            coord: FeedForward::new(store, &format!("{prefix}.coord"), d, d, kind.n_coords(), rng),
            kind,
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn forward(&self, ctx: &Ctx, state: &Tensor) -> Result<HeadOutput> {
        Ok(HeadOutput {
            logits: self.class.forward(ctx, state)?,
            coords: self.coord.forward(ctx, state)?.sigmoid()?,
        })
    }
}

/// Token projection + encoder + query decoder + heads: one detection transformer.
#[derive(Debug, Clone)]
pub struct SetTransformer {
    input: Linear,
    query_embed: String,
    n_queries: usize,
    d_model: usize,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: PredictionHeads,
}

/// Predictions of every decoder layer plus the raw query embedding.
#[derive(Debug, Clone)]
pub struct SetPrediction {
    /// Heads applied to the initial query embedding (before any decoding).
    pub initial: HeadOutput,
    /// One entry per decoder layer, last is final.
    pub layers: Vec<HeadOutput>,
}

impl SetPrediction {
    pub fn last(&self) -> &HeadOutput {
        self.layers.last().unwrap_or(&self.initial)
    }
}

pub struct SetTransformerSpec {
    pub in_channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_queries: usize,
    pub kind: HeadKind,
}

impl SetTransformer {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: &SetTransformerSpec, rng: &mut impl Rng) -> std::result::Result<SetTransformer, TensorError> {
        let d = spec.d_model;
        let input = Linear::new(store, &format!("{prefix}.input"), spec.in_channels, d, ParamGroup::Transformer, rng);
        let query_embed = format!("{prefix}.query_embed");
        store.normal(&query_embed, &[spec.n_queries, d], 1.0, ParamGroup::Transformer, rng);
        Ok(SetTransformer {
            input,
            query_embed,
            n_queries: spec.n_queries,
            d_model: d,
            encoder: Encoder::new(store, &format!("{prefix}.encoder"), d, spec.n_heads, spec.ffn_dim, spec.n_encoder_layers, rng)?,
            decoder: Decoder::new(store, &format!("{prefix}.decoder"), d, spec.n_heads, spec.ffn_dim, spec.n_decoder_layers, rng)?,
            heads: PredictionHeads::new(store, &format!("{prefix}.heads"), d, spec.kind, rng),
        })
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    /// `tokens`: `[batch·n × in_channels]`; `pos`: `[n × d_model]` shared by every block.
    pub fn forward(&self, ctx: &Ctx, tokens: &Tensor, pos: &Tensor, batch: usize) -> Result<SetPrediction> {
        let n = tokens.shape()[0] / batch.max(1);
        if pos.shape() != [n, self.d_model] {
            return Err(TensorError::Shape {
                op: "positional encoding",
                lhs: tokens.shape().to_vec(),
                rhs: pos.shape().to_vec(),
            });
        }
        let x = self
            .input
            .forward(ctx, tokens)?
            .reshape(&[batch, n, self.d_model])?
            .add(pos)?
            .reshape(&[batch * n, self.d_model])?;
        let memory = self.encoder.forward(ctx, &x, Blocks {
            batch,
            q_len: n,
            kv_len: n,
        })?;
        let embed = ctx.p(&self.query_embed)?;
        let queries = if batch == 1 {
            embed.clone()
        } else {
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..self.n_queries).collect();
            embed.gather(&idx)?
        };
        let states = self.decoder.forward(ctx, &queries, &memory, batch)?;
        let initial = self.heads.forward(ctx, &embed)?;
        let layers = states
            .iter()
            .map(|s| self.heads.forward(ctx, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(SetPrediction { initial, layers })
    }
}
