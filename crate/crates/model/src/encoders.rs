//! The query encoder and the two-stream video encoder.
//!
//! Query: project word features to the model dimension, add positional
//! embeddings, run two transformer blocks, then pool one summary vector per
//! video stream with stream-specific additive-attention weights; each summary
//! also gets a learned re-projection used by the localization scores.
//!
//! Video: project each stream (visual, subtitle) to the model dimension, add
//! positional embeddings, run one self-attention block per stream, exchange
//! information with one co-attentional block per direction, and refine with a
//! final self-attention block per stream. Without subtitles the co-attention
//! stage degenerates to self-attention over the visual stream.

use vcmr_tensor::graph::Var;
use vcmr_tensor::Scalar;

use crate::blocks::{add_positional, additive_pool, co_attention_block, linear, transformer_block};
use crate::session::Session;
use crate::{ModelError, Result};

/// Query representations: the per-word sequence plus pooled and re-projected
/// summary vectors per video stream.
#[derive(Debug, Clone, Copy)]
pub struct EncodedQuery {
    /// Post-transformer word sequence, `[d, n_q]`.
    pub q_tilde: Var,
    /// Visual-stream summary vector, `[d]`.
    pub q_v: Var,
    /// Subtitle-stream summary vector; present iff subtitles are configured.
    pub q_s: Option<Var>,
    /// Re-projected visual summary used by localization scores, `[d]`.
    pub q_prime_v: Var,
    /// Re-projected subtitle summary.
    pub q_prime_s: Option<Var>,
}

/// Video representations per stream: the cross-modal sequence H′ and the
/// final refined sequence H, each `[d, n_v]`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVideo {
    pub h_prime_v: Var,
    pub h_v: Var,
    pub h_prime_s: Option<Var>,
    pub h_s: Option<Var>,
    pub n_v: usize,
}

fn check_sequence<T: Scalar>(
    s: &Session<T>,
    x: Var,
    rows: usize,
    mask: &[bool],
    what: &str,
) -> Result<usize> {
    let shape = s.graph_shape(x);
    if shape.len() != 2 || shape[0] != rows {
        return Err(ModelError::data(format!(
            "{what} features must be [{rows}, n], got {shape:?}"
        )));
    }
    let n = shape[1];
    if mask.len() != n {
        return Err(ModelError::data(format!(
            "{what} mask covers {} positions, sequence has {n}",
            mask.len()
        )));
    }
    Ok(n)
}

impl<'a, T: Scalar> Session<'a, T> {
    fn graph_shape(&self, v: Var) -> Vec<usize> {
        self.graph_ref().shape(v).to_vec()
    }
}

/// Encodes one query from word features `[d_w, n_q]`.
pub fn encode_query<T: Scalar>(
    s: &mut Session<T>,
    words: Var,
    mask: &[bool],
) -> Result<EncodedQuery> {
    let cfg = s.cfg().clone();
    let n_q = check_sequence(s, words, cfg.d_w, mask, "query word")?;
    if n_q == 0 || !mask.iter().any(|&m| m) {
        return Err(ModelError::data("query has no valid words"));
    }
    if n_q > cfg.n_q_max {
        return Err(ModelError::config(format!(
            "query length {n_q} exceeds configured maximum {}",
            cfg.n_q_max
        )));
    }

    let p = s.model().query;
    let projected = linear(s, p.proj, words)?;
    let embedded = add_positional(s, p.pos, projected)?;
    let embedded = s.g().dropout(embedded, cfg.dropout)?;
    let mid = transformer_block(s, p.block1, embedded, mask)?;
    let q_tilde = transformer_block(s, p.block2, mid, mask)?;

    let q_v = additive_pool(s, p.pool_v, q_tilde, mask)?;
    let q_prime_v = linear_vec(s, p.reproj_v, q_v)?;
    let (q_s, q_prime_s) = match (p.pool_s, p.reproj_s) {
        (Some(pool), Some(reproj)) => {
            let qs = additive_pool(s, pool, q_tilde, mask)?;
            let qps = linear_vec(s, reproj, qs)?;
            (Some(qs), Some(qps))
        }
        _ => (None, None),
    };
    Ok(EncodedQuery { q_tilde, q_v, q_s, q_prime_v, q_prime_s })
}

/// Applies an affine map to a `[d]` vector, returning a `[d]` vector.
pub(crate) fn linear_vec<T: Scalar>(
    s: &mut Session<T>,
    p: crate::params::LinearP,
    x: Var,
) -> Result<Var> {
    let d = s.graph_shape(x)[0];
    let col = s.g().reshape(x, &[d, 1])?;
    let y = linear(s, p, col)?;
    let out_d = s.graph_shape(y)[0];
    Ok(s.g().reshape(y, &[out_d])?)
}

/// Encodes one video from visual features `[d_v, n_v]` and, when configured,
/// subtitle features `[d_w, n_v]` aligned to the same clip units and mask.
pub fn encode_video<T: Scalar>(
    s: &mut Session<T>,
    visual: Var,
    subtitle: Option<Var>,
    mask: &[bool],
) -> Result<EncodedVideo> {
    let cfg = s.cfg().clone();
    if cfg.subtitles != subtitle.is_some() {
        return Err(ModelError::config(if cfg.subtitles {
            "model expects a subtitle stream but none was provided".to_string()
        } else {
            "model has no subtitle stream but subtitle features were provided".to_string()
        }));
    }
    let n_v = check_sequence(s, visual, cfg.d_v, mask, "visual")?;
    if n_v == 0 || !mask.iter().any(|&m| m) {
        return Err(ModelError::data("video has no valid clip units"));
    }
    if n_v > cfg.n_v_max {
        return Err(ModelError::config(format!(
            "video length {n_v} exceeds configured maximum {}",
            cfg.n_v_max
        )));
    }
    if let Some(sub) = subtitle {
        let n_s = check_sequence(s, sub, cfg.d_w, mask, "subtitle")?;
        if n_s != n_v {
            return Err(ModelError::data(format!(
                "subtitle stream has {n_s} clip units, visual stream has {n_v}"
            )));
        }
    }

    let vp = s.model().video.visual;
    let v_emb = {
        let projected = linear(s, vp.proj, visual)?;
        let embedded = add_positional(s, vp.pos, projected)?;
        s.g().dropout(embedded, cfg.dropout)?
    };
    let v_tilde = transformer_block(s, vp.self_block, v_emb, mask)?;

    let (h_prime_v, h_prime_s) = match (subtitle, s.model().video.subtitle) {
        (Some(sub), Some(sp)) => {
            let s_emb = {
                let projected = linear(s, sp.proj, sub)?;
                let embedded = add_positional(s, sp.pos, projected)?;
                s.g().dropout(embedded, cfg.dropout)?
            };
            let s_tilde = transformer_block(s, sp.self_block, s_emb, mask)?;
            let hv = co_attention_block(s, vp.cross_block, v_tilde, s_tilde, mask)?;
            let hs = co_attention_block(s, sp.cross_block, s_tilde, v_tilde, mask)?;
            (hv, Some(hs))
        }
        // Subtitle-free mode: cross-attention degenerates to self-attention.
        _ => (co_attention_block(s, vp.cross_block, v_tilde, v_tilde, mask)?, None),
    };

    let h_v = transformer_block(s, vp.final_block, h_prime_v, mask)?;
    let h_s = match (h_prime_s, s.model().video.subtitle) {
        (Some(hps), Some(sp)) => Some(transformer_block(s, sp.final_block, hps, mask)?),
        _ => None,
    };

    Ok(EncodedVideo { h_prime_v, h_v, h_prime_s, h_s, n_v })
}
