//! Building blocks shared by the encoder, decoder and mention block.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{lit, EmptyRows, Float, Graph, Mask, Tensor, Var};

/// `x · W + b` with arrays `{prefix}.weight` `[in, out]` and `{prefix}.bias`.
pub fn linear<T: Float>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_named(&format!("{prefix}.weight"))?;
    let b = g.param_named(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm<T: Float>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param_named(&format!("{prefix}.gamma"))?;
    let beta = g.param_named(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// `fc2(relu(fc1(x)))`.
pub fn feed_forward<T: Float>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.fc1"), x)?;
    let h = g.relu(h)?;
    linear(g, &format!("{prefix}.fc2"), h)
}

/// Post-norm residual connection: `LN(x + dropout(sub))`.
pub fn residual_norm<T: Float>(
    g: &mut Graph<'_, T>,
    ln_prefix: &str,
    x: Var,
    sub: Var,
    dropout: f64,
) -> Result<Var> {
    let sub = g.dropout(sub, dropout)?;
    let y = g.add(x, sub)?;
    layer_norm(g, ln_prefix, y)
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// Output after the output projection, `[B, Lq, d]`.
    pub out: Var,
    /// Attention probabilities, `[B, H, Lq, Lk]`.
    pub probs: Var,
}

/// Multi-head scaled dot-product attention of `query [B, Lq, d]` over
/// `memory [B, Lk, d]`. `mask` broadcasts against `[B, H, Lq, Lk]`.
pub fn multi_head_attention<T: Float>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    query: Var,
    memory: Var,
    heads: usize,
    mask: &Mask,
    empty: EmptyRows,
) -> Result<Attention> {
    let (qs, ms) = (g.shape(query).to_vec(), g.shape(memory).to_vec());
    if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != ms[2] {
        return Err(Error::dim(
            "multi_head_attention",
            format!("query {qs:?} vs memory {ms:?}"),
        ));
    }
    let (b, lq, lk, d) = (qs[0], qs[1], ms[1], qs[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(
            "multi_head_attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let dk = d / heads;
    let split = |g: &mut Graph<'_, T>, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, len, heads, dk])?;
        g.permute_0213(x)
    };
    let q = linear(g, &format!("{prefix}.q_proj"), query)?;
    let q = g.scale(q, lit(1.0 / (dk as f64).sqrt()))?;
    let q = split(g, q, lq)?;
    let k = linear(g, &format!("{prefix}.k_proj"), memory)?;
    let k = split(g, k, lk)?;
    let v = linear(g, &format!("{prefix}.v_proj"), memory)?;
    let v = split(g, v, lk)?;
    let scores = g.bmm(q, k, true)?;
    let probs = g.softmax_masked(scores, Some(mask), 3, empty)?;
    let ctx = g.bmm(probs, v, false)?;
    let ctx = g.permute_0213(ctx)?;
    let ctx = g.reshape(ctx, &[b, lq, d])?;
    let out = linear(g, &format!("{prefix}.out_proj"), ctx)?;
    Ok(Attention { out, probs })
}

/// Sinusoidal position table `[len, d]`: `sin(pos/10000^(2i/d))` at even
/// columns and the matching cosine at odd columns.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Token embedding scaled by `sqrt(d)` plus sinusoidal positions, then
/// dropout.
pub fn embed<T: Float>(
    g: &mut Graph<'_, T>,
    table: &str,
    ids: &[usize],
    batch: usize,
    len: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let d = cfg.d_model;
    let w = g.param_named(table)?;
    let e = g.embedding(w, ids, &[batch, len])?;
    let e = g.scale(e, lit((d as f64).sqrt()))?;
    let pe = positional_encoding(len, d);
    let mut tiled = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        tiled.extend(pe.iter().map(|&x| lit::<T>(x)));
    }
    let pe = g.input(Tensor::new(vec![batch, len, d], tiled)?);
    let x = g.add(e, pe)?;
    g.dropout(x, cfg.dropout)
}

/// Key-padding mask `[B, 1, 1, L]` keeping non-pad positions.
pub fn key_mask(pad: &[bool], batch: usize, len: usize) -> Result<Mask> {
    Mask::new(vec![batch, 1, 1, len], pad.iter().map(|&p| !p).collect())
}

/// Causal plus key-padding mask `[B, 1, L, L]`.
pub fn causal_mask(pad: &[bool], batch: usize, len: usize) -> Result<Mask> {
    let mut keep = Vec::with_capacity(batch * len * len);
    for b in 0..batch {
        for i in 0..len {
            for j in 0..len {
                keep.push(j <= i && !pad[b * len + j]);
            }
        }
    }
    Mask::new(vec![batch, 1, len, len], keep)
}
