use super::params::{Ctx, ParamGroup, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    /// Registers a `[d_in × d_out]` weight and `[d_out]` bias under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, group: ParamGroup, rng: &mut impl Rng) -> Linear {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.xavier(&weight, &[d_in, d_out], d_in, d_out, group, rng);
        store.constant(&bias, &[d_out], 0.0, group);
        Linear { weight, bias }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        x.matmul(&ctx.p(&self.weight)?)?.add(&ctx.p(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> LayerNorm {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        store.constant(&gamma, &[d], 1.0, ParamGroup::Transformer);
        store.constant(&beta, &[d], 0.0, ParamGroup::Transformer);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&ctx.p(&self.gamma)?, &ctx.p(&self.beta)?)
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> FeedForward {
        FeedForward {
            l1: Linear::new(store, &format!("{prefix}.l1"), d, hidden, ParamGroup::Transformer, rng),
            l2: Linear::new(store, &format!("{prefix}.l2"), hidden, d_out, ParamGroup::Transformer, rng),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(ctx, &self.l1.forward(ctx, x)?.relu()?)
    }
}

/// Row layout of stacked independent sequences: `batch` blocks of
/// `q_len` query rows attending only to their own `kv_len` key rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
}

impl Blocks {
    pub fn single(q_len: usize, kv_len: usize) -> Blocks {
        Blocks {
            batch: 1,
            q_len,
            kv_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, n_heads: usize, rng: &mut impl Rng) -> std::result::Result<MultiHeadAttention, TensorError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(TensorError::Contract(format!(
                "d_model {d_model} is not divisible into {n_heads} heads"
            )));
        }
        let g = ParamGroup::Transformer;
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{prefix}.q"), d_model, d_model, g, rng),
            k: Linear::new(store, &format!("{prefix}.k"), d_model, d_model, g, rng),
            v: Linear::new(store, &format!("{prefix}.v"), d_model, d_model, g, rng),
            out: Linear::new(store, &format!("{prefix}.out"), d_model, d_model, g, rng),
            n_heads,
            d_model,
        })
    }

    pub fn forward(&self, ctx: &Ctx, queries: &Tensor, keys: &Tensor, values: &Tensor, blocks: Blocks) -> Result<Tensor> {
        Ok(self.forward_with_weights(ctx, queries, keys, values, blocks)?.0)
    }

    /// Also returns the softmax weights, indexed `[block * n_heads + head]`,
    /// each of shape `[q_len × kv_len]`.
    pub fn forward_with_weights(
        &self,
        ctx: &Ctx,
        queries: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        blocks: Blocks,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let Blocks {
            batch,
            q_len,
            kv_len,
        } = blocks;
        if queries.shape() != [batch * q_len, self.d_model]
            || keys.shape() != [batch * kv_len, self.d_model]
            || values.shape() != keys.shape()
        {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                lhs: queries.shape().to_vec(),
                rhs: keys.shape().to_vec(),
            });
        }
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(ctx, queries)?;
        let k = self.k.forward(ctx, keys)?;
        let v = self.v.forward(ctx, values)?;
        let mut weights = Vec::with_capacity(batch * self.n_heads);
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = q.slice(0, b * q_len, (b + 1) * q_len)?;
            let kb = k.slice(0, b * kv_len, (b + 1) * kv_len)?;
            let vb = v.slice(0, b * kv_len, (b + 1) * kv_len)?;
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = qb.slice(1, h * dh, (h + 1) * dh)?;
                let kh = kb.slice(1, h * dh, (h + 1) * dh)?;
                let vh = vb.slice(1, h * dh, (h + 1) * dh)?;
                let attn = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax(1)?;
                heads.push(attn.matmul(&vh)?);
                weights.push(attn);
            }
            rows.push(Tensor::concat(&heads, 1)?);
        }
        let merged = if rows.len() == 1 {
            rows.pop().expect("one block")
        } else {
            Tensor::concat(&rows, 0)?
        };
        Ok((self.out.forward(ctx, &merged)?, weights))
    }
}
