//! Training objectives.
//!
//! * Video-retrieval hinge: cosine similarity between a pooled query vector
//!   and the best-matching frame, hinged against mean negative scores.
//! * Moment localization: cross-entropy of start/end distributions produced
//!   by boundary convolutions over query–frame scores.
//! * Video-level NCE: a ratio of matched to all (query, video) pairings in
//!   the batch, in a space shared by learned f/g projections.
//! * Frame-level MI: a Jensen-Shannon estimator separating in-span
//!   (foreground) from out-of-span (background) frames under a bilinear
//!   discriminator.

use vcmr_tensor::graph::Var;
use vcmr_tensor::Scalar;

use crate::blocks::{additive_pool, predict_boundaries};
use crate::encoders::{EncodedQuery, EncodedVideo};
use crate::session::Session;
use crate::{ModelError, Result};

/// Cosine similarity between `q_m` (`[d]`) and every column of `h_m`
/// (`[d, n]`); returns `[n]`. Norms are clamped at 1e−12, so zero vectors
/// yield zero scores rather than NaN.
pub fn vr_frame_scores<T: Scalar>(s: &mut Session<T>, q_m: Var, h_m: Var) -> Result<Var> {
    let g = s.g();
    let d = g.shape(q_m)[0];
    let n = g.shape(h_m)[1];
    let q_col = g.reshape(q_m, &[d, 1])?;
    let q_unit = g.l2_normalize_cols(q_col)?;
    let h_unit = g.l2_normalize_cols(h_m)?;
    let q_row = g.transpose(q_unit)?;
    let scores = g.matmul(q_row, h_unit)?;
    Ok(g.reshape(scores, &[n])?)
}

/// Video-level similarity φ: per stream, the maximum frame cosine over valid
/// positions; averaged across the streams that exist.
pub fn vr_similarity<T: Scalar>(
    s: &mut Session<T>,
    q: &EncodedQuery,
    v: &EncodedVideo,
    mask: &[bool],
) -> Result<Var> {
    let sv = vr_frame_scores(s, q.q_v, v.h_v)?;
    let phi_v = s.g().masked_max(sv, mask)?;
    match (q.q_s, v.h_s) {
        (Some(qs), Some(hs)) => {
            let ss = vr_frame_scores(s, qs, hs)?;
            let phi_s = s.g().masked_max(ss, mask)?;
            let sum = s.g().add(phi_v, phi_s)?;
            Ok(s.g().scale(sum, T::from_f64(0.5))?)
        }
        (None, None) => Ok(phi_v),
        _ => Err(ModelError::config("query and video disagree about the subtitle stream")),
    }
}

/// Hinge loss for one anchor: `max(0, Δ + mean(Φ′) − φ) + max(0, Δ +
/// mean(Φ″) − φ)` where Φ′ scores the anchor video against negative queries
/// and Φ″ the anchor query against negative videos.
pub fn vr_hinge_loss<T: Scalar>(
    s: &mut Session<T>,
    phi_pos: Var,
    query_negatives: &[Var],
    video_negatives: &[Var],
    margin: f64,
) -> Result<Var> {
    if query_negatives.is_empty() || video_negatives.is_empty() {
        return Err(ModelError::config("retrieval hinge needs at least one negative per side"));
    }
    let hinge = |negs: &[Var], s: &mut Session<T>| -> Result<Var> {
        let g = s.g();
        let total = g.add_n(negs)?;
        let mean = g.scale(total, T::from_f64(1.0 / negs.len() as f64))?;
        let gap = g.sub(mean, phi_pos)?;
        let shifted = g.add_scalar(gap, T::from_f64(margin))?;
        Ok(g.relu(shifted)?)
    };
    let a = hinge(query_negatives, s)?;
    let b = hinge(video_negatives, s)?;
    Ok(s.g().add(a, b)?)
}

/// Localization scores `[1, n]`: dot products of the re-projected query
/// vector with every frame, averaged over streams; masked positions are
/// zeroed so padding cannot bleed through the boundary convolutions.
pub fn ml_scores<T: Scalar>(
    s: &mut Session<T>,
    q: &EncodedQuery,
    v: &EncodedVideo,
    mask: &[bool],
) -> Result<Var> {
    let dots = |s: &mut Session<T>, qp: Var, h: Var| -> Result<Var> {
        let g = s.g();
        let d = g.shape(qp)[0];
        let q_col = g.reshape(qp, &[d, 1])?;
        let q_row = g.transpose(q_col)?;
        Ok(g.matmul(q_row, h)?)
    };
    let scores = match (q.q_prime_s, v.h_s) {
        (Some(qps), Some(hs)) => {
            let a = dots(s, q.q_prime_v, v.h_v)?;
            let b = dots(s, qps, hs)?;
            let sum = s.g().add(a, b)?;
            s.g().scale(sum, T::from_f64(0.5))?
        }
        (None, None) => dots(s, q.q_prime_v, v.h_v)?,
        _ => return Err(ModelError::config("query and video disagree about the subtitle stream")),
    };
    if mask.iter().all(|&m| m) {
        return Ok(scores);
    }
    let keep: Vec<T> = mask.iter().map(|&m| T::from_f64(if m { 1.0 } else { 0.0 })).collect();
    let g = s.g();
    let keep_row = g.constant(vcmr_tensor::Tensor::from_vec(&[1, mask.len()], keep)?)?;
    Ok(g.mul(scores, keep_row)?)
}

/// Start/end probability vectors (`[n]` each) over valid positions.
pub fn ml_distributions<T: Scalar>(
    s: &mut Session<T>,
    scores: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let heads = s.model().heads;
    let (start_raw, end_raw) = predict_boundaries(s, heads.conv_start, heads.conv_end, scores)?;
    let g = s.g();
    let n = g.shape(start_raw)[1];
    let start_flat = g.reshape(start_raw, &[n])?;
    let end_flat = g.reshape(end_raw, &[n])?;
    let p_start = g.masked_softmax(start_flat, mask)?;
    let p_end = g.masked_softmax(end_flat, mask)?;
    Ok((p_start, p_end))
}

/// Cross-entropy of the gold span: `½(−ln P_start[i_s] − ln P_end[i_e])`.
pub fn ml_loss<T: Scalar>(
    s: &mut Session<T>,
    p_start: Var,
    p_end: Var,
    span: (usize, usize),
    mask: &[bool],
) -> Result<Var> {
    let (i_s, i_e) = span;
    let n = s.graph_len(p_start);
    if !(i_s <= i_e && i_e < n) {
        return Err(ModelError::data(format!(
            "gold span ({i_s}, {i_e}) invalid for {n} positions"
        )));
    }
    if !mask[i_s] || !mask[i_e] {
        return Err(ModelError::data(format!(
            "gold span ({i_s}, {i_e}) touches padded positions"
        )));
    }
    let g = s.g();
    let ps = g.select(p_start, i_s)?;
    let pe = g.select(p_end, i_e)?;
    let ls = g.ln(ps)?;
    let le = g.ln(pe)?;
    let total = g.add(ls, le)?;
    Ok(g.scale(total, T::from_f64(-0.5))?)
}

impl<'a, T: Scalar> Session<'a, T> {
    fn graph_len(&self, v: Var) -> usize {
        self.graph_ref().shape(v).iter().product()
    }
}

/// Noise-contrastive ratio over a flat score set: `−log(Σ_P e^s / Σ_all e^s)`
/// = `logsumexp(all) − logsumexp(positives)`. With no negatives present the
/// ratio is 1 and the loss exactly 0.
pub fn nce_loss<T: Scalar>(s: &mut Session<T>, scores: Var, positive: &[bool]) -> Result<Var> {
    let n = s.graph_len(scores);
    if positive.len() != n {
        return Err(ModelError::data(format!(
            "positive mask covers {} scores, got {n}",
            positive.len()
        )));
    }
    if !positive.iter().any(|&p| p) {
        return Err(ModelError::data("contrastive ratio needs at least one positive pair"));
    }
    let g = s.g();
    let flat = if g.shape(scores).len() == 1 { scores } else { g.reshape(scores, &[n])? };
    let lse_all = g.logsumexp(flat, None)?;
    let lse_pos = g.logsumexp(flat, Some(positive))?;
    Ok(g.sub(lse_all, lse_pos)?)
}

/// Pools one video-level summary vector from a cross-modal sequence with the
/// contrastive head's stream-specific weights.
pub fn contrastive_video_vec<T: Scalar>(
    s: &mut Session<T>,
    h_prime: Var,
    mask: &[bool],
    subtitle_stream: bool,
) -> Result<Var> {
    let cl = s.model().heads.contrastive;
    let pool = if subtitle_stream {
        cl.pool_s.ok_or_else(|| ModelError::config("no subtitle pooling weights configured"))?
    } else {
        cl.pool_v
    };
    additive_pool(s, pool, h_prime, mask)
}

/// Per-stream inputs of the video-level contrastive loss: one query summary
/// and one pooled video vector per anchor (anchors sharing a video should
/// share the pooled variable).
pub struct StreamPairs<'v> {
    pub queries: &'v [Var],
    pub videos: &'v [Var],
}

/// Video-level NCE over a batch. `positive[a][b]` marks whether anchor `a`'s
/// query matches anchor `b`'s video (same underlying video). Scores are
/// `g(q_a)·f(c_b)` for every ordered pair; the loss is averaged over the
/// streams that exist.
pub fn video_cl_loss<T: Scalar>(
    s: &mut Session<T>,
    visual: StreamPairs,
    subtitle: Option<StreamPairs>,
    positive: &[Vec<bool>],
) -> Result<Var> {
    let b = visual.queries.len();
    if b < 2 {
        return Err(ModelError::config(format!(
            "video-level contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if visual.videos.len() != b || positive.len() != b || positive.iter().any(|r| r.len() != b) {
        return Err(ModelError::data("contrastive batch inputs disagree on batch size"));
    }
    let flat_positive: Vec<bool> = positive.iter().flatten().copied().collect();

    let cl = s.model().heads.contrastive;
    let stream_loss = |s: &mut Session<T>, pairs: &StreamPairs| -> Result<Var> {
        let d = s.graph_len(pairs.queries[0]);
        let mut f_cols = Vec::with_capacity(b);
        let mut g_cols = Vec::with_capacity(b);
        for i in 0..b {
            let fc = crate::encoders::linear_vec(s, cl.f, pairs.videos[i])?;
            let gc = crate::encoders::linear_vec(s, cl.g, pairs.queries[i])?;
            let g = s.g();
            f_cols.push(g.reshape(fc, &[d, 1])?);
            g_cols.push(g.reshape(gc, &[d, 1])?);
        }
        let g = s.g();
        let f_mat = g.concat_cols(&f_cols)?;
        let g_mat = g.concat_cols(&g_cols)?;
        let gt = g.transpose(g_mat)?;
        let scores = g.matmul(gt, f_mat)?;
        nce_loss(s, scores, &flat_positive)
    };

    let lv = stream_loss(s, &visual)?;
    match subtitle {
        Some(sub) => {
            if sub.queries.len() != b || sub.videos.len() != b {
                return Err(ModelError::data("subtitle stream batch size mismatch"));
            }
            let ls = stream_loss(s, &sub)?;
            let sum = s.g().add(lv, ls)?;
            Ok(s.g().scale(sum, T::from_f64(0.5))?)
        }
        None => Ok(lv),
    }
}

/// Frame-level Jensen-Shannon MI loss for one anchor. Foreground frames are
/// the gold span's valid positions, background the remaining valid ones.
/// Returns the loss and whether the background term was dropped (span covers
/// every valid frame).
pub fn frame_cl_loss<T: Scalar>(
    s: &mut Session<T>,
    q: &EncodedQuery,
    v: &EncodedVideo,
    span: (usize, usize),
    mask: &[bool],
) -> Result<(Var, bool)> {
    let (i_s, i_e) = span;
    let n = v.n_v;
    if !(i_s <= i_e && i_e < n) {
        return Err(ModelError::data(format!(
            "gold span ({i_s}, {i_e}) invalid for {n} positions"
        )));
    }
    let fg: Vec<bool> = (0..n).map(|i| mask[i] && i >= i_s && i <= i_e).collect();
    let bg: Vec<bool> = (0..n).map(|i| mask[i] && (i < i_s || i > i_e)).collect();
    if !fg.iter().any(|&m| m) {
        return Err(ModelError::data("foreground of the gold span is entirely padded"));
    }
    let background_exists = bg.iter().any(|&m| m);

    let disc = s.model().heads.contrastive.disc;
    let stream_loss = |s: &mut Session<T>, q_m: Var, h_prime: Var| -> Result<Var> {
        let w = s.param(disc)?;
        let g = s.g();
        let d = g.shape(q_m)[0];
        let q_col = g.reshape(q_m, &[d, 1])?;
        let q_row = g.transpose(q_col)?;
        let qw = g.matmul(q_row, w)?;
        let c_row = g.matmul(qw, h_prime)?;
        let c = g.reshape(c_row, &[n])?;
        // loss = mean_F[sp(−C)] + mean_B[sp(C)]  (negated estimator)
        let neg_c = g.scale(c, T::from_f64(-1.0))?;
        let sp_neg = g.softplus(neg_c)?;
        let fg_term = g.masked_mean(sp_neg, &fg)?;
        if background_exists {
            let sp_pos = g.softplus(c)?;
            let bg_term = g.masked_mean(sp_pos, &bg)?;
            Ok(g.add(fg_term, bg_term)?)
        } else {
            Ok(fg_term)
        }
    };

    let lv = stream_loss(s, q.q_v, v.h_prime_v)?;
    let loss = match (q.q_s, v.h_prime_s) {
        (Some(qs), Some(hps)) => {
            let ls = stream_loss(s, qs, hps)?;
            let sum = s.g().add(lv, ls)?;
            s.g().scale(sum, T::from_f64(0.5))?
        }
        (None, None) => lv,
        _ => return Err(ModelError::config("query and video disagree about the subtitle stream")),
    };
    Ok((loss, !background_exists))
}

/// The gated loss components of one step, unweighted.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub vr: Option<Var>,
    pub ml: Option<Var>,
    pub video_cl: Option<Var>,
    pub frame_cl: Option<Var>,
}

/// Weighted total `λ1·L_VR + λ2·L_ML + λ3·L_VideoCL + λ4·L_FrameCL` over the
/// components present.
pub fn total_loss<T: Scalar>(s: &mut Session<T>, parts: &LossParts) -> Result<Var> {
    let lambda = s.cfg().lambda;
    let mut terms = Vec::new();
    for (part, weight) in [
        (parts.vr, lambda[0]),
        (parts.ml, lambda[1]),
        (parts.video_cl, lambda[2]),
        (parts.frame_cl, lambda[3]),
    ] {
        if let Some(v) = part {
            terms.push(s.g().scale(v, T::from_f64(weight))?);
        }
    }
    if terms.is_empty() {
        return Err(ModelError::config("total loss needs at least one enabled component"));
    }
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    Ok(s.g().add_n(&terms)?)
}
