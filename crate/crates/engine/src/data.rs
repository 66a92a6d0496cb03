//! Synthetic planted-signal corpora and the time↔index mapping.
//!
//! Each annotated moment gets a latent vector that is mapped into visual and
//! word space by fixed random linear maps. Frames inside the gold span carry
//! the visual direction on top of isotropic noise, subtitles carry the word
//! direction over the same span, and the query's word features are noisy
//! copies of the word direction. The generator finishes with a self-test: an
//! oracle scorer that knows the planted directions must rank every gold
//! video first, and foreground frames must out-correlate background frames
//! by a stated margin — otherwise the spec is rejected as infeasible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vcmr_tensor::{seed, Tensor};

use crate::{EngineError, Result};

// ---------------------------------------------------------------- mapping

/// Maps a timestamp in seconds to a clip-unit index: `floor(τ/duration·n_v)`
/// clamped to `[0, n_v−1]`.
pub fn time_to_index(tau: f64, duration: f64, n_v: usize) -> Result<usize> {
    if n_v == 0 {
        return Err(EngineError::config("time_to_index needs n_v ≥ 1"));
    }
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(EngineError::data(format!("duration must be positive, got {duration}")));
    }
    if !(0.0..=duration).contains(&tau) || !tau.is_finite() {
        return Err(EngineError::data(format!(
            "timestamp {tau} outside [0, {duration}]"
        )));
    }
    let idx = (tau / duration * n_v as f64).floor() as usize;
    Ok(idx.min(n_v - 1))
}

/// Maps a `(τ_s, τ_e)` pair to inclusive clip-unit indices. The end time is
/// nudged down by `duration·1e−9` before flooring so a span ending exactly on
/// a bin boundary maps to the bin it fills rather than the next one, and the
/// result is clamped so `i_e ≥ i_s`.
pub fn span_to_indices(
    tau_s: f64,
    tau_e: f64,
    duration: f64,
    n_v: usize,
) -> Result<(usize, usize)> {
    if !(tau_s < tau_e) {
        return Err(EngineError::data(format!(
            "span must satisfy τ_s < τ_e, got ({tau_s}, {tau_e})"
        )));
    }
    let i_s = time_to_index(tau_s, duration, n_v)?;
    let epsilon = duration * 1e-9;
    let i_e = time_to_index((tau_e - epsilon).max(0.0), duration, n_v)?;
    Ok((i_s, i_e.max(i_s)))
}

// ------------------------------------------------------------------ types

/// One corpus video: per-clip-unit visual features and, optionally, aligned
/// subtitle features.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// Length in seconds.
    pub duration: f64,
    /// `[d_v, n_v]`, one column per clip unit.
    pub vis_feats: Tensor<f32>,
    /// `[d_w, n_v]`, aligned to the same clip units.
    pub sub_feats: Option<Tensor<f32>>,
    /// Marks real clip units (all true for generated corpora).
    pub mask: Vec<bool>,
}

impl VideoRecord {
    pub fn n_v(&self) -> usize {
        self.vis_feats.shape()[1]
    }
}

/// One annotated (query, moment) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAnnotation {
    pub query_id: String,
    pub video_id: String,
    /// `[d_w, n_q]`, one column per word.
    pub word_feats: Tensor<f32>,
    /// Gold times in seconds, `0 ≤ τ_s < τ_e ≤ duration`.
    pub tau_s: f64,
    pub tau_e: f64,
    /// Gold inclusive clip-unit indices.
    pub i_s: usize,
    pub i_e: usize,
}

impl QueryAnnotation {
    pub fn n_q(&self) -> usize {
        self.word_feats.shape()[1]
    }
}

/// Disjoint train/validation video-id sets.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// A full corpus: videos, annotations, and the split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub videos: Vec<VideoRecord>,
    pub annotations: Vec<QueryAnnotation>,
    pub splits: Splits,
}

impl Corpus {
    pub fn has_subtitles(&self) -> bool {
        self.videos.first().is_some_and(|v| v.sub_feats.is_some())
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.id == id)
    }

    /// Indices of annotations whose video belongs to the given id set.
    pub fn annotations_in(&self, ids: &[String]) -> Vec<usize> {
        self.annotations
            .iter()
            .enumerate()
            .filter(|(_, a)| ids.iter().any(|id| *id == a.video_id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Recipe for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Corpus size (number of videos).
    pub m: usize,
    /// Inclusive range of clip units per video.
    pub n_v: (usize, usize),
    /// Inclusive range of words per query.
    pub n_q: (usize, usize),
    pub d_v: usize,
    pub d_w: usize,
    /// Dimension of the planted latent vectors. Keep this ≥ d_v: smaller
    /// latents inflate cross-correlations between planted directions, which
    /// can make the retrieval task ambiguous and fail the solvability check.
    pub latent_dim: usize,
    /// Target cosine between a foreground frame and its planted direction,
    /// in (0, 1). Controls how separable the task is.
    pub signal_strength: f64,
    /// Standard deviation of the isotropic feature noise.
    pub noise_scale: f64,
    /// Standard deviation of the per-word perturbation of query features.
    pub query_noise: f64,
    /// Inclusive range of annotated moments per video.
    pub moments_per_video: (usize, usize),
    /// Inclusive range of seconds per clip unit.
    pub unit_seconds: (f64, f64),
    /// Fraction of videos assigned to the train split, in (0, 1].
    pub train_fraction: f64,
    /// Whether to generate the subtitle stream.
    pub subtitles: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            m: 96,
            n_v: (48, 48),
            n_q: (6, 24),
            d_v: 96,
            d_w: 48,
            latent_dim: 96,
            signal_strength: 0.8,
            noise_scale: 1.0,
            query_noise: 0.3,
            moments_per_video: (1, 5),
            unit_seconds: (1.0, 2.5),
            train_fraction: 2.0 / 3.0,
            subtitles: true,
            seed: 13,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |detail: String| Err(EngineError::Config { detail });
        if self.m == 0 {
            return err("corpus size must be ≥ 1".into());
        }
        if self.n_v.0 < 3 || self.n_v.0 > self.n_v.1 {
            return err(format!(
                "n_v range {:?} invalid: spans need floor(0.40·n_v) ≥ ceil(0.05·n_v) ≥ 1, so n_v ≥ 3",
                self.n_v
            ));
        }
        if self.n_q.0 == 0 || self.n_q.0 > self.n_q.1 {
            return err(format!("n_q range {:?} invalid", self.n_q));
        }
        if self.d_v == 0 || self.d_w == 0 || self.latent_dim == 0 {
            return err("feature and latent dimensions must be ≥ 1".into());
        }
        if !(self.signal_strength > 0.0 && self.signal_strength < 1.0) {
            return err(format!(
                "signal strength must lie in (0, 1), got {}",
                self.signal_strength
            ));
        }
        if !(self.noise_scale > 0.0) || !(self.query_noise >= 0.0) {
            return err("noise scales must be positive (query noise may be zero)".into());
        }
        if self.moments_per_video.0 == 0 || self.moments_per_video.0 > self.moments_per_video.1 {
            return err(format!("moments range {:?} invalid", self.moments_per_video));
        }
        if !(self.unit_seconds.0 > 0.0 && self.unit_seconds.0 <= self.unit_seconds.1) {
            return err(format!("unit-seconds range {:?} invalid", self.unit_seconds));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return err(format!(
                "train fraction must lie in (0, 1], got {}",
                self.train_fraction
            ));
        }
        Ok(())
    }
}

/// A generated corpus along with the generator's self-test statistics.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    /// Recall@1 of the planted-direction oracle scorer (must be 1.0).
    pub oracle_vr_r1: f64,
    /// Mean foreground-minus-background cosine gap against the planted
    /// directions (must be ≥ signal_strength / 2).
    pub fg_bg_margin: f64,
}

// -------------------------------------------------------------- generation

struct Planted {
    video: usize,
    span: (usize, usize),
    u_vis: Vec<f64>,
    #[allow(dead_code)]
    u_word: Vec<f64>,
}

fn sample_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= norm;
    }
}

/// `A·z` for a row-major `[rows, cols]` map.
fn map_latent(a: &[f64], rows: usize, cols: usize, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &a[r * cols..(r + 1) * cols];
        *o = row.iter().zip(z).map(|(m, zv)| m * zv).sum();
    }
    out
}

fn inclusive(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.random_range(range.0..=range.1)
}

/// Non-overlapping span placement: lengths in `[ceil(0.05·n), floor(0.40·n)]`,
/// dropping trailing moments if the lengths cannot all fit, with the slack
/// spread across the gaps.
fn place_spans(rng: &mut ChaCha8Rng, n: usize, want: usize) -> Vec<(usize, usize)> {
    let lo = ((0.05 * n as f64).ceil() as usize).max(1);
    let hi = (0.40 * n as f64).floor() as usize;
    let mut lengths: Vec<usize> = (0..want).map(|_| rng.random_range(lo..=hi)).collect();
    while lengths.iter().sum::<usize>() > n {
        lengths.pop();
    }
    let m = lengths.len();
    let slack = n - lengths.iter().sum::<usize>();
    // Cut the slack into m+1 gaps.
    let mut cuts: Vec<usize> = (0..m).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(m);
    let mut pos = 0usize;
    let mut prev_cut = 0usize;
    for (j, len) in lengths.iter().enumerate() {
        pos += cuts[j] - prev_cut;
        prev_cut = cuts[j];
        spans.push((pos, pos + len - 1));
        pos += len;
    }
    spans
}

/// Cosine in f64 between a planted direction and one stored f32 frame column.
fn frame_cosine(u: &[f64], feats: &Tensor<f32>, col: usize) -> f64 {
    let n = feats.shape()[1];
    let mut dot = 0.0;
    let mut norm = 0.0;
    for (r, uv) in u.iter().enumerate() {
        let x = feats.data()[r * n + col] as f64;
        dot += uv * x;
        norm += x * x;
    }
    dot / norm.sqrt().max(1e-12)
}

/// Generates a corpus per the spec and runs the solvability self-test.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let kappa = spec.signal_strength;
    let sigma = spec.noise_scale;
    // Foreground amplitude giving an expected frame↔direction cosine of κ:
    // with x = σ·ε + s·u, E[x·u] = s and E[‖x‖²] ≈ σ²·d + s².
    let amp = |d: usize| kappa * sigma * (d as f64).sqrt() / (1.0 - kappa * kappa).sqrt();
    let s_vis = amp(spec.d_v);
    let s_word = amp(spec.d_w);

    let stream = |tag: &str| ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, tag, 0));
    let mut structure_rng = stream("structure");
    let mut latent_rng = stream("latent");
    let mut vis_rng = stream("visual-noise");
    let mut sub_rng = stream("subtitle-noise");
    let mut query_rng = stream("query-noise");

    let a_v = sample_normal_vec(&mut stream("map-v"), spec.d_v * spec.latent_dim);
    let a_w = sample_normal_vec(&mut stream("map-w"), spec.d_w * spec.latent_dim);

    let mut videos = Vec::with_capacity(spec.m);
    let mut annotations = Vec::new();
    let mut planted: Vec<Planted> = Vec::new();
    let mut query_counter = 0usize;

    for vi in 0..spec.m {
        let n_v = inclusive(&mut structure_rng, spec.n_v);
        let unit = structure_rng.random_range(spec.unit_seconds.0..=spec.unit_seconds.1);
        let duration = unit * n_v as f64;
        let want = inclusive(&mut structure_rng, spec.moments_per_video);
        let spans = place_spans(&mut structure_rng, n_v, want);

        let mut vis = vec![0.0f64; spec.d_v * n_v];
        for x in vis.iter_mut() {
            *x = sigma * normal_sample(&mut vis_rng);
        }
        let mut sub = if spec.subtitles {
            let mut s = vec![0.0f64; spec.d_w * n_v];
            for x in s.iter_mut() {
                *x = sigma * normal_sample(&mut sub_rng);
            }
            Some(s)
        } else {
            None
        };

        let video_id = format!("vid_{vi:04}");
        for &(i_s, i_e) in &spans {
            let mut z = sample_normal_vec(&mut latent_rng, spec.latent_dim);
            normalize(&mut z);
            let mut u_vis = map_latent(&a_v, spec.d_v, spec.latent_dim, &z);
            normalize(&mut u_vis);
            let mut u_word = map_latent(&a_w, spec.d_w, spec.latent_dim, &z);
            normalize(&mut u_word);

            for c in i_s..=i_e {
                for r in 0..spec.d_v {
                    vis[r * n_v + c] += s_vis * u_vis[r];
                }
                if let Some(s) = sub.as_mut() {
                    for r in 0..spec.d_w {
                        s[r * n_v + c] += s_word * u_word[r];
                    }
                }
            }

            let n_q = inclusive(&mut structure_rng, spec.n_q);
            let mut words = vec![0.0f64; spec.d_w * n_q];
            for c in 0..n_q {
                for r in 0..spec.d_w {
                    words[r * n_q + c] =
                        u_word[r] + spec.query_noise * normal_sample(&mut query_rng);
                }
            }

            let tau_s = (i_s as f64 + 0.25) * unit;
            let tau_e = (i_e as f64 + 0.75) * unit;
            let round_trip = span_to_indices(tau_s, tau_e, duration, n_v)?;
            assert_eq!(round_trip, (i_s, i_e), "time↔index mapping must invert exactly");

            annotations.push(QueryAnnotation {
                query_id: format!("qry_{query_counter:05}"),
                video_id: video_id.clone(),
                word_feats: to_f32(&[spec.d_w, n_q], &words),
                tau_s,
                tau_e,
                i_s,
                i_e,
            });
            planted.push(Planted { video: vi, span: (i_s, i_e), u_vis, u_word });
            query_counter += 1;
        }

        videos.push(VideoRecord {
            id: video_id,
            duration,
            vis_feats: to_f32(&[spec.d_v, n_v], &vis),
            sub_feats: sub.map(|s| to_f32(&[spec.d_w, n_v], &s)),
            mask: vec![true; n_v],
        });
    }

    let n_train = ((spec.m as f64 * spec.train_fraction).round() as usize).clamp(1, spec.m);
    let splits = Splits {
        train: videos[..n_train].iter().map(|v| v.id.clone()).collect(),
        val: videos[n_train..].iter().map(|v| v.id.clone()).collect(),
    };

    let corpus = Corpus { videos, annotations, splits };
    let (oracle_vr_r1, fg_bg_margin) = self_test(&corpus, &planted);
    if oracle_vr_r1 < 1.0 {
        return Err(EngineError::config(format!(
            "infeasible spec: planted-direction oracle reaches VR Recall@1 = {oracle_vr_r1}, \
             expected 1.0 — raise signal_strength or shrink the corpus"
        )));
    }
    let required = kappa / 2.0;
    if fg_bg_margin < required {
        return Err(EngineError::config(format!(
            "infeasible spec: foreground/background cosine margin {fg_bg_margin:.4} \
             below required {required:.4}"
        )));
    }
    Ok(GeneratedCorpus { corpus, oracle_vr_r1, fg_bg_margin })
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn to_f32(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    Tensor::from_vec(shape, data.iter().map(|&x| x as f32).collect())
        .expect("generator shapes are consistent")
}

/// Oracle scorer over planted directions: for each annotation, every video is
/// scored by its best frame cosine against the annotation's visual direction.
/// Returns (Recall@1, mean fg−bg cosine margin).
fn self_test(corpus: &Corpus, planted: &[Planted]) -> (f64, f64) {
    let mut hits = 0usize;
    let mut margin_sum = 0.0;
    for p in planted {
        let mut best_video = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (vi, video) in corpus.videos.iter().enumerate() {
            let mut score = f64::NEG_INFINITY;
            for c in 0..video.n_v() {
                score = score.max(frame_cosine(&p.u_vis, &video.vis_feats, c));
            }
            // Strict comparison with ascending index tie-break.
            if score > best_score {
                best_score = score;
                best_video = vi;
            }
        }
        if best_video == p.video {
            hits += 1;
        }

        let own = &corpus.videos[p.video];
        let (mut fg_sum, mut fg_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..own.n_v() {
            let cosine = frame_cosine(&p.u_vis, &own.vis_feats, c);
            if c >= p.span.0 && c <= p.span.1 {
                fg_sum += cosine;
                fg_n += 1;
            } else {
                bg_sum += cosine;
                bg_n += 1;
            }
        }
        let fg_mean = fg_sum / fg_n.max(1) as f64;
        let bg_mean = if bg_n > 0 { bg_sum / bg_n as f64 } else { 0.0 };
        margin_sum += fg_mean - bg_mean;
    }
    let r1 = hits as f64 / planted.len().max(1) as f64;
    (r1, margin_sum / planted.len().max(1) as f64)
}

// ------------------------------------------------------------------- tests
