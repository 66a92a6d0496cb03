//! Reusable layers: affine maps, multi-head attention, transformer and
//! co-attentional blocks, additive-attention pooling, learned positional
//! embeddings, and the start/end boundary convolutions.
//!
//! Sequences are matrices with features along rows and positions along
//! columns (shape `[d, n]`); boolean masks mark valid positions.

use vcmr_tensor::graph::Var;
use vcmr_tensor::Scalar;

use crate::params::{AttentionP, BlockP, LayerNormP, LinearP, ParamId};
use crate::session::Session;
use crate::{ModelError, Result};

/// Layer-norm variance stabilizer.
pub const LN_EPS: f64 = 1e-5;

/// y = W·x + b applied to every column of `x`.
pub fn linear<T: Scalar>(s: &mut Session<T>, p: LinearP, x: Var) -> Result<Var> {
    let w = s.param(p.w)?;
    let b = s.param(p.b)?;
    let g = s.g();
    let wx = g.matmul(w, x)?;
    Ok(g.add_bias_cols(wx, b)?)
}

/// Per-column layer norm over the feature dimension.
pub fn layer_norm<T: Scalar>(s: &mut Session<T>, p: LayerNormP, x: Var) -> Result<Var> {
    let gain = s.param(p.gain)?;
    let bias = s.param(p.bias)?;
    Ok(s.g().layer_norm_cols(x, gain, bias, T::from_f64(LN_EPS))?)
}

/// Scaled dot-product multi-head attention. Queries come from `x_q`
/// (shape `[d, n_q]`), keys and values from `x_kv` (shape `[d, n_kv]`);
/// `kv_mask` marks attendable positions of `x_kv`. Per head, scores are
/// scaled by 1/√(d/h); masked positions receive exactly zero weight.
pub fn multi_head_attention<T: Scalar>(
    s: &mut Session<T>,
    p: AttentionP,
    x_q: Var,
    x_kv: Var,
    kv_mask: &[bool],
) -> Result<Var> {
    let d = s.cfg().d;
    let heads = s.cfg().heads;
    let dh = s.cfg().head_dim();
    let n_kv = s.g().shape(x_kv)[1];
    if kv_mask.len() != n_kv {
        return Err(ModelError::data(format!(
            "attention mask covers {} positions, sequence has {n_kv}",
            kv_mask.len()
        )));
    }

    let q = linear(s, p.q, x_q)?;
    let k = linear(s, p.k, x_kv)?;
    let v = linear(s, p.v, x_kv)?;
    debug_assert_eq!(s.g().shape(q)[0], d);

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let g = s.g();
        let qh = g.slice_rows(q, h * dh, dh)?;
        let kh = g.slice_rows(k, h * dh, dh)?;
        let vh = g.slice_rows(v, h * dh, dh)?;
        // scores[i, j] = k_i · q_j, one column per query position.
        let kt = g.transpose(kh)?;
        let scores = g.matmul(kt, qh)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.masked_softmax(scores, kv_mask)?;
        head_outputs.push(g.matmul(vh, weights)?);
    }
    let merged = s.g().concat_rows(&head_outputs)?;
    linear(s, p.o, merged)
}

/// Co-attentional transformer block: attention queries from `x`, keys and
/// values from `y`, then a position-wise feed-forward; residual adds and
/// layer norms follow each sublayer (post-norm order).
pub fn co_attention_block<T: Scalar>(
    s: &mut Session<T>,
    p: BlockP,
    x: Var,
    y: Var,
    y_mask: &[bool],
) -> Result<Var> {
    let rate = s.cfg().dropout;
    let attended = multi_head_attention(s, p.attn, x, y, y_mask)?;
    let attended = s.g().dropout(attended, rate)?;
    let mid = s.g().add(x, attended)?;
    let mid = layer_norm(s, p.ln1, mid)?;

    let inner = linear(s, p.ff1, mid)?;
    let inner = s.g().relu(inner)?;
    let ff = linear(s, p.ff2, inner)?;
    let ff = s.g().dropout(ff, rate)?;
    let out = s.g().add(mid, ff)?;
    layer_norm(s, p.ln2, out)
}

/// Standard self-attention transformer block: the co-attentional block with
/// both roles played by `x`, so the two are bitwise identical on `y = x`.
pub fn transformer_block<T: Scalar>(
    s: &mut Session<T>,
    p: BlockP,
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    co_attention_block(s, p, x, x, mask)
}

/// Additive-attention pooling: softmax(W_α·H) over valid positions, then the
/// weighted sum of the corresponding columns. Returns a `[d]` vector.
pub fn additive_pool<T: Scalar>(
    s: &mut Session<T>,
    w_alpha: ParamId,
    h: Var,
    mask: &[bool],
) -> Result<Var> {
    let w = s.param(w_alpha)?;
    let g = s.g();
    let (d, n) = (g.shape(h)[0], g.shape(h)[1]);
    if mask.len() != n {
        return Err(ModelError::data(format!(
            "pooling mask covers {} positions, sequence has {n}",
            mask.len()
        )));
    }
    let scores = g.matmul(w, h)?;
    let flat = g.reshape(scores, &[n])?;
    let alpha = g.masked_softmax(flat, mask)?;
    let alpha_col = g.reshape(alpha, &[n, 1])?;
    let pooled = g.matmul(h, alpha_col)?;
    Ok(g.reshape(pooled, &[d])?)
}

/// Adds learned positional embeddings (columns 0..n−1 of `table`) to `x`.
pub fn add_positional<T: Scalar>(s: &mut Session<T>, table: ParamId, x: Var) -> Result<Var> {
    let t = s.param(table)?;
    let g = s.g();
    let n = g.shape(x)[1];
    let n_max = g.shape(t)[1];
    if n > n_max {
        return Err(ModelError::config(format!(
            "sequence length {n} exceeds positional table size {n_max}"
        )));
    }
    let prefix = g.slice_cols(t, 0, n)?;
    Ok(g.add(x, prefix)?)
}

/// Runs the two independent boundary convolutions over a `[1, n]` score row.
pub fn predict_boundaries<T: Scalar>(
    s: &mut Session<T>,
    conv_start: ParamId,
    conv_end: ParamId,
    scores: Var,
) -> Result<(Var, Var)> {
    let ks = s.param(conv_start)?;
    let ke = s.param(conv_end)?;
    let g = s.g();
    let start = g.conv1d(scores, ks)?;
    let end = g.conv1d(scores, ke)?;
    Ok((start, end))
}
