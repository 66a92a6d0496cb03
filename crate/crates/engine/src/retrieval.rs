//! The f32 serving path: top-K video retrieval and span localization.
//!
//! Inference never touches the autodiff graph. Queries are encoded once into
//! plain vectors; video scores and boundary distributions are then computed
//! with hand-rolled f32 loops that mirror the training-graph kernels exactly
//! (same normalization floor, same padded convolution, same masked softmax),
//! so graph-side scores and served scores agree to float precision.

use serde::Serialize;
use vcmr_model::{encode_query, Model, Session};
use vcmr_tensor::graph::{Graph, NORM_FLOOR};
use vcmr_tensor::Tensor;

use crate::index::{CorpusIndex, IndexEntry};
use crate::{EngineError, Result};

// ---------------------------------------------------------------- queries

/// One query's pooled and re-projected vectors, per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVectors {
    /// Pooled vectors used by the video-level similarity φ.
    pub q_v: Vec<f32>,
    pub q_s: Option<Vec<f32>>,
    /// Re-projected vectors used by the localization scores.
    pub qp_v: Vec<f32>,
    pub qp_s: Option<Vec<f32>>,
}

/// Encodes a query into serving vectors with a fresh evaluation graph.
pub fn encode_query_vectors(
    model: &Model<f32>,
    words: &Tensor<f32>,
    mask: &[bool],
) -> Result<QueryVectors> {
    let mut g = Graph::eval();
    let mut s = Session::new(model, &mut g);
    let w = s.g().constant(words.clone())?;
    let q = encode_query(&mut s, w, mask)?;
    let grab = |s: &Session<f32>, v| s.value(v).data().to_vec();
    let vectors = QueryVectors {
        q_v: grab(&s, q.q_v),
        q_s: q.q_s.map(|v| grab(&s, v)),
        qp_v: grab(&s, q.q_prime_v),
        qp_s: q.q_prime_s.map(|v| grab(&s, v)),
    };
    for (name, vec) in [("pooled", &vectors.q_v), ("re-projected", &vectors.qp_v)] {
        if !vec.iter().all(|x| x.is_finite()) {
            return Err(EngineError::data(format!(
                "query encoded to non-finite {name} vector"
            )));
        }
    }
    Ok(vectors)
}

// ----------------------------------------------------------------- scoring

/// Cosine between a query vector and one frame, matching the graph's
/// normalization floor.
fn cosine(q: &[f32], frame: &[f32]) -> f32 {
    let floor = NORM_FLOOR as f32;
    let qn = q.iter().map(|x| x * x).sum::<f32>().sqrt();
    let fper = frame.iter().map(|x| x * x).sum::<f32>().sqrt();
    let rq = if qn > floor { qn } else { floor };
    let rf = if fper_over(fper, floor) { fper } else { floor };
    let mut dot = 0.0f32;
    for (a, b) in q.iter().zip(frame) {
        dot += (a / rq) * (b / rf);
    }
    dot
}

fn fper_over(v: f32, floor: f32) -> bool {
    v > floor
}

/// Video-level similarity φ: per stream, the best frame cosine over valid
/// positions; streams averaged.
pub fn phi_score(query: &QueryVectors, entry: &IndexEntry, d: usize) -> Result<f32> {
    if query.q_s.is_some() != entry.h_s.is_some() {
        return Err(EngineError::config(
            "query and index disagree about the subtitle stream",
        ));
    }
    if !entry.mask.iter().any(|&m| m) {
        return Err(EngineError::data(format!("video {} has no valid frames", entry.id)));
    }
    let best = |q: &[f32], stream_s: bool| -> f32 {
        let mut best = f32::NEG_INFINITY;
        for f in 0..entry.n_v {
            if !entry.mask[f] {
                continue;
            }
            let frame = if stream_s {
                entry.frame_s(d, f).expect("subtitle stream present")
            } else {
                entry.frame(d, f)
            };
            let c = cosine(q, frame);
            if c > best {
                best = c;
            }
        }
        best
    };
    let phi_v = best(&query.q_v, false);
    Ok(match &query.q_s {
        Some(qs) => 0.5 * (phi_v + best(qs, true)),
        None => phi_v,
    })
}

/// Localization scores: stream-averaged `q′·H[t]`, zero at masked positions.
pub fn ml_frame_scores(query: &QueryVectors, entry: &IndexEntry, d: usize) -> Result<Vec<f32>> {
    if query.qp_s.is_some() != entry.h_s.is_some() {
        return Err(EngineError::config(
            "query and index disagree about the subtitle stream",
        ));
    }
    let mut scores = vec![0.0f32; entry.n_v];
    for (f, out) in scores.iter_mut().enumerate() {
        if !entry.mask[f] {
            continue;
        }
        let dot = |q: &[f32], frame: &[f32]| q.iter().zip(frame).map(|(a, b)| a * b).sum::<f32>();
        let sv = dot(&query.qp_v, entry.frame(d, f));
        *out = match &query.qp_s {
            Some(qs) => 0.5 * (sv + dot(qs, entry.frame_s(d, f).expect("present"))),
            None => sv,
        };
    }
    Ok(scores)
}

/// The boundary head's kernels, extracted for graph-free serving.
#[derive(Debug, Clone, PartialEq)]
pub struct Localizer {
    pub width: usize,
    pub start_kernel: Vec<f32>,
    pub end_kernel: Vec<f32>,
}

impl Localizer {
    pub fn from_model(model: &Model<f32>) -> Localizer {
        let start = model.params.get(model.heads.conv_start);
        let end = model.params.get(model.heads.conv_end);
        Localizer {
            width: start.shape()[2],
            start_kernel: start.data().to_vec(),
            end_kernel: end.data().to_vec(),
        }
    }

    /// Same-padded single-channel convolution, zero outside the sequence —
    /// the serving twin of the graph convolution.
    fn convolve(&self, kernel: &[f32], x: &[f32]) -> Vec<f32> {
        let n = x.len();
        let pad = (self.width - 1) / 2;
        let mut out = vec![0.0f32; n];
        for (u, &kw) in kernel.iter().enumerate() {
            let lo = pad.saturating_sub(u);
            let hi = if u >= pad { n.saturating_sub(u - pad) } else { n };
            for t in lo..hi {
                out[t] += kw * x[t + u - pad];
            }
        }
        out
    }

    /// Start/end probability distributions over valid positions.
    pub fn distributions(&self, scores: &[f32], mask: &[bool]) -> Result<(Vec<f32>, Vec<f32>)> {
        if mask.len() != scores.len() {
            return Err(EngineError::data(format!(
                "mask covers {} positions, scores have {}",
                mask.len(),
                scores.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(EngineError::data("no valid position to localize over"));
        }
        let p_start = masked_softmax(&self.convolve(&self.start_kernel, scores), mask);
        let p_end = masked_softmax(&self.convolve(&self.end_kernel, scores), mask);
        Ok((p_start, p_end))
    }
}

/// Max-shifted masked softmax, mirroring the graph kernel.
fn masked_softmax(x: &[f32], mask: &[bool]) -> Vec<f32> {
    let mut mx = f32::NEG_INFINITY;
    for (v, &ok) in x.iter().zip(mask) {
        if ok && *v > mx {
            mx = *v;
        }
    }
    let mut out = vec![0.0f32; x.len()];
    let mut sum = 0.0f32;
    for (i, (&v, &ok)) in x.iter().zip(mask).enumerate() {
        if ok {
            let e = (v - mx).exp();
            out[i] = e;
            sum += e;
        }
    }
    for (o, &ok) in out.iter_mut().zip(mask) {
        if ok {
            *o /= sum;
        }
    }
    out
}

// ------------------------------------------------------------- retrieval

/// Exact top-K videos by φ, descending, ties broken by ascending video id.
/// Returns `(entry index, φ)` pairs; ids come from `index.entries`.
pub fn retrieve_videos(
    query: &QueryVectors,
    index: &CorpusIndex,
    k: usize,
) -> Result<Vec<(usize, f32)>> {
    if index.entries.is_empty() {
        return Err(EngineError::data("cannot retrieve from an empty index"));
    }
    if k == 0 {
        return Err(EngineError::config("retrieval needs K ≥ 1"));
    }
    let mut scored: Vec<(usize, f32)> = Vec::with_capacity(index.entries.len());
    for (i, entry) in index.entries.iter().enumerate() {
        scored.push((i, phi_score(query, entry, index.d)?));
    }
    // Entries are sorted by id, so index order is id order.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// All spans `i_s ≤ i_e`, `i_e − i_s + 1 ≤ l_max` over valid positions,
/// ranked by `P_start[i_s]·P_end[i_e]` descending, ties by earlier start
/// then earlier end; the best `top_n` are returned.
pub fn localize_moments(
    p_start: &[f32],
    p_end: &[f32],
    mask: &[bool],
    top_n: usize,
    l_max: usize,
) -> Result<Vec<((usize, usize), f64)>> {
    if top_n == 0 || l_max == 0 {
        return Err(EngineError::config("localization needs top_n ≥ 1 and L_max ≥ 1"));
    }
    if p_start.len() != p_end.len() || p_start.len() != mask.len() {
        return Err(EngineError::data("distribution and mask lengths disagree"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(EngineError::data("no valid position to localize over"));
    }
    let n = p_start.len();
    let mut spans: Vec<((usize, usize), f64)> = Vec::new();
    for i_s in 0..n {
        if !mask[i_s] {
            continue;
        }
        let last = (i_s + l_max - 1).min(n - 1);
        for i_e in i_s..=last {
            if !mask[i_e] {
                continue;
            }
            spans.push(((i_s, i_e), p_start[i_s] as f64 * p_end[i_e] as f64));
        }
    }
    spans.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0 .0.cmp(&b.0 .0))
            .then(a.0 .1.cmp(&b.0 .1))
    });
    spans.truncate(top_n);
    Ok(spans)
}

// ------------------------------------------------------------------ VCMR

/// One ranked corpus-level moment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentPrediction {
    pub video_id: String,
    pub i_s: usize,
    pub i_e: usize,
    /// Joint boundary probability P_start[i_s]·P_end[i_e].
    pub p_se: f64,
    /// Video-level similarity of the retrieved video.
    pub phi: f32,
    /// Final score δ = P_se · e^{γ·φ}.
    pub delta: f64,
}

/// Retrieval parameters for corpus-level moment ranking.
#[derive(Debug, Clone, Copy)]
pub struct RankParams {
    pub k: usize,
    pub top_n: usize,
    pub l_max: usize,
    pub gamma: f64,
}

/// Two-stage corpus search: retrieve top-K videos by φ, localize `top_n`
/// spans in each, rank everything by δ = P_se·e^{γφ}. Ties break by
/// ascending video id, then earlier start, then earlier end.
pub fn vcmr_rank(
    query: &QueryVectors,
    index: &CorpusIndex,
    localizer: &Localizer,
    params: RankParams,
) -> Result<Vec<MomentPrediction>> {
    let top = retrieve_videos(query, index, params.k)?;
    let mut out: Vec<(usize, MomentPrediction)> = Vec::new();
    for (entry_idx, phi) in top {
        let entry = &index.entries[entry_idx];
        let scores = ml_frame_scores(query, entry, index.d)?;
        let (p_start, p_end) = localizer.distributions(&scores, &entry.mask)?;
        for ((i_s, i_e), p_se) in
            localize_moments(&p_start, &p_end, &entry.mask, params.top_n, params.l_max)?
        {
            let delta = p_se * (params.gamma * phi as f64).exp();
            out.push((
                entry_idx,
                MomentPrediction { video_id: entry.id.clone(), i_s, i_e, p_se, phi, delta },
            ));
        }
    }
    out.sort_by(|a, b| {
        b.1.delta
            .partial_cmp(&a.1.delta)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.i_s.cmp(&b.1.i_s))
            .then(a.1.i_e.cmp(&b.1.i_e))
    });
    Ok(out.into_iter().map(|(_, p)| p).collect())
}
