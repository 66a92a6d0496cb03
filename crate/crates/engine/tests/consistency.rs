//! The serving path must reproduce the training graph's scores.
//!
//! φ and the boundary distributions are computed twice over identical
//! encoded features — once through the autodiff graph (as the losses see
//! them) and once through the graph-free f32 serving code — and compared
//! elementwise to 1e-5.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcmr_engine::data::{generate_synthetic_corpus, SyntheticSpec};
use vcmr_engine::index::build_corpus_index;
use vcmr_engine::retrieval::{encode_query_vectors, ml_frame_scores, phi_score, Localizer};
use vcmr_model::{
    encode_query, encode_video, ml_distributions, ml_scores, vr_similarity, Model, ModelConfig,
    Session,
};
use vcmr_tensor::{Graph, Tensor};

const TOL: f32 = 1e-5;

fn spec(subtitles: bool) -> SyntheticSpec {
    SyntheticSpec {
        m: 6,
        n_v: (8, 14),
        n_q: (3, 6),
        d_v: 20,
        d_w: 14,
        latent_dim: 24,
        signal_strength: 0.9,
        moments_per_video: (1, 2),
        subtitles,
        seed: 31,
        ..SyntheticSpec::default()
    }
}

fn model(subtitles: bool) -> Model<f32> {
    Model::new(ModelConfig {
        d: 16,
        d_v: 20,
        d_w: 14,
        heads: 2,
        d_ff: 32,
        n_v_max: 16,
        n_q_max: 8,
        conv_width: 5,
        dropout: 0.1, // irrelevant in eval mode; kept non-zero on purpose
        subtitles,
        seed: 77,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Graph-side φ and boundary distributions for one (query, video) pair.
fn graph_scores(
    model: &Model<f32>,
    words: &Tensor<f32>,
    q_mask: &[bool],
    video: &vcmr_engine::data::VideoRecord,
) -> (f32, Vec<f32>, Vec<f32>) {
    let mut g = Graph::eval();
    let mut s = Session::new(model, &mut g);
    let w = s.g().constant(words.clone()).unwrap();
    let q = encode_query(&mut s, w, q_mask).unwrap();
    let vis = s.g().constant(video.vis_feats.clone()).unwrap();
    let sub = video
        .sub_feats
        .as_ref()
        .map(|t| s.g().constant(t.clone()).unwrap());
    let v = encode_video(&mut s, vis, sub, &video.mask).unwrap();
    let phi = vr_similarity(&mut s, &q, &v, &video.mask).unwrap();
    let scores = ml_scores(&mut s, &q, &v, &video.mask).unwrap();
    let (p_start, p_end) = ml_distributions(&mut s, scores, &video.mask).unwrap();
    (
        s.value(phi).item(),
        s.value(p_start).data().to_vec(),
        s.value(p_end).data().to_vec(),
    )
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn check_consistency(subtitles: bool) {
    let generated = generate_synthetic_corpus(&spec(subtitles)).unwrap();
    let corpus = generated.corpus;
    let model = model(subtitles);
    let index = build_corpus_index(&model, [0u8; 32], &corpus.videos).unwrap();
    let localizer = Localizer::from_model(&model);

    let mut checked = 0usize;
    for ann in corpus.annotations.iter().take(8) {
        let q_mask = vec![true; ann.word_feats.shape()[1]];
        let qv = encode_query_vectors(&model, &ann.word_feats, &q_mask).unwrap();
        for entry in &index.entries {
            let video = corpus
                .videos
                .iter()
                .find(|v| v.id == entry.id)
                .expect("index entries come from the corpus");
            let (phi_g, ps_g, pe_g) = graph_scores(&model, &ann.word_feats, &q_mask, video);

            let phi_s = phi_score(&qv, entry, index.d).unwrap();
            let scores = ml_frame_scores(&qv, entry, index.d).unwrap();
            let (ps_s, pe_s) = localizer.distributions(&scores, &entry.mask).unwrap();

            assert!(
                (phi_g - phi_s).abs() <= TOL,
                "phi mismatch {} vs {} for {} / {}",
                phi_g,
                phi_s,
                ann.query_id,
                entry.id
            );
            assert!(
                max_abs_diff(&ps_g, &ps_s) <= TOL,
                "start distribution mismatch for {} / {}",
                ann.query_id,
                entry.id
            );
            assert!(
                max_abs_diff(&pe_g, &pe_s) <= TOL,
                "end distribution mismatch for {} / {}",
                ann.query_id,
                entry.id
            );
            checked += 1;
        }
    }
    assert!(checked >= 24, "expected a meaningful number of pairs, got {checked}");
}

#[test]
fn serving_matches_graph_with_subtitles() {
    check_consistency(true);
}

#[test]
fn serving_matches_graph_without_subtitles() {
    check_consistency(false);
}

/// Padded query positions must not influence serving scores.
#[test]
fn query_padding_is_inert_in_serving() {
    let model = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n_q = 5;
    let words = Tensor::<f32>::randn(&[14, n_q], &mut rng);
    let mask = vec![true, true, true, false, false];

    let mut poisoned = words.clone();
    {
        let n = n_q;
        let data = poisoned.data_mut();
        for r in 0..14 {
            for c in 3..n {
                data[r * n + c] = 1e6;
            }
        }
    }
    let a = encode_query_vectors(&model, &words, &mask).unwrap();
    let b = encode_query_vectors(&model, &poisoned, &mask).unwrap();
    assert!(max_abs_diff(&a.q_v, &b.q_v) <= 1e-6);
    assert!(max_abs_diff(&a.qp_v, &b.qp_v) <= 1e-6);
    assert!(max_abs_diff(a.q_s.as_ref().unwrap(), b.q_s.as_ref().unwrap()) <= 1e-6);
}
