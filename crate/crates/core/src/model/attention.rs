//! Scaled dot-product multi-head attention and the pre-norm transformer blocks
//! built from it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, Linear, Mlp, Norm, NormKind, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
        })
    }

    pub fn numel(&self) -> usize {
        self.query.numel() + self.key.numel() + self.value.numel() + self.output.numel()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        multi_head_attention(g, store, self, q, k, v)
    }
}

/// `softmax(Q K^T / sqrt(d_head)) V` per head, heads concatenated then projected.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    queries: Var,
    keys: Var,
    values: Var,
) -> Result<Var> {
    let d = mha.query.d_in;
    let (_, dq) = g.shape(queries);
    let (mk, dk) = g.shape(keys);
    let (mv, dv) = g.shape(values);
    if dq != d || dk != d || dv != d || mk != mv {
        return Err(Error::dim(format!(
            "attention inputs {:?}/{:?}/{:?} for width {d}",
            g.shape(queries),
            g.shape(keys),
            g.shape(values)
        )));
    }
    let q = mha.query.forward(g, store, queries)?;
    let k = mha.key.forward(g, store, keys)?;
    let v = mha.value.forward(g, store, values)?;
    let dh = d / mha.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(mha.heads);
    for h in 0..mha.heads {
        let (qh, kh, vh) = if mha.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let weights = g.softmax(logits, Axis::Cols)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let mixed = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    mha.output.forward(g, store, mixed)
}

/// Two-layer ReLU feed-forward network.
pub fn feed_forward(store: &mut ParamStore, name: &str, dim: usize, mult: usize, rng: &mut impl Rng) -> Result<Mlp> {
    Mlp::new(store, name, &[dim, mult * dim, dim], rng)
}

fn layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<Norm> {
    Norm::new(store, name, NormKind::Layer, dim)
}

/// Pre-norm self-attention block with position added to queries and keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayer {
    pub norm_attn: Norm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: Norm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: layer_norm(store, &format!("{name}.norm_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ffn: layer_norm(store, &format!("{name}.norm_ffn"), dim)?,
            ffn: feed_forward(store, &format!("{name}.ffn"), dim, ffn_mult, rng)?,
        })
    }

    pub fn numel(&self) -> usize {
        self.norm_attn.numel() + self.attn.numel() + self.norm_ffn.numel() + self.ffn.numel()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pos: Var) -> Result<Var> {
        let h = self.norm_attn.forward(g, store, x)?;
        let qk = g.add(h, pos)?;
        let a = self.attn.forward(g, store, qk, qk, h)?;
        let x = g.add(x, a)?;
        let h = self.norm_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder block: self-attention, cross-attention to the scene
/// memory, feed-forward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderLayer {
    pub norm_self: Norm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: Norm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: Norm,
    pub ffn: Mlp,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_self: layer_norm(store, &format!("{name}.norm_self"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm_cross: layer_norm(store, &format!("{name}.norm_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm_ffn: layer_norm(store, &format!("{name}.norm_ffn"), dim)?,
            ffn: feed_forward(store, &format!("{name}.ffn"), dim, ffn_mult, rng)?,
        })
    }

    pub fn numel(&self) -> usize {
        self.norm_self.numel()
            + self.self_attn.numel()
            + self.norm_cross.numel()
            + self.cross_attn.numel()
            + self.norm_ffn.numel()
            + self.ffn.numel()
    }

    /// `memory_keyed` is the scene memory with its positional embedding added;
    /// it serves as both keys and values.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        pos: Var,
        memory_keyed: Var,
    ) -> Result<Var> {
        let h = self.norm_self.forward(g, store, x)?;
        let qk = g.add(h, pos)?;
        let a = self.self_attn.forward(g, store, qk, qk, h)?;
        let x = g.add(x, a)?;
        let h = self.norm_cross.forward(g, store, x)?;
        let q = g.add(h, pos)?;
        let c = self.cross_attn.forward(g, store, q, memory_keyed, memory_keyed)?;
        let x = g.add(x, c)?;
        let h = self.norm_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }

    /// Zeroes the output projections of both attentions and the last FFN layer,
    /// which turns the block into the identity.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.self_attn.output.zero(store);
        self.cross_attn.output.zero(store);
        if let Some(last) = self.ffn.layers.last() {
            last.zero(store);
        }
    }
}
