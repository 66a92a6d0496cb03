//! Padding must be inert: overwriting padded positions of the inputs with
//! arbitrary finite values may not change any quantity the model reports for
//! the valid positions — encodings at valid frames, similarity scores,
//! boundary distributions, pooled summaries, or any loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcmr_model::objectives::{
    self, contrastive_video_vec, frame_cl_loss, ml_distributions, ml_loss, ml_scores,
    vr_similarity, StreamPairs,
};
use vcmr_model::{encode_query, encode_video, Model, ModelConfig, Session};
use vcmr_tensor::graph::{Graph, Var};
use vcmr_tensor::Tensor;

const N_V: usize = 6;
const N_Q: usize = 5;
const V_MASK: [bool; N_V] = [true, true, true, true, false, false];
const Q_MASK: [bool; N_Q] = [true, true, true, false, false];

fn cfg() -> ModelConfig {
    ModelConfig {
        d: 8,
        d_v: 6,
        d_w: 5,
        heads: 2,
        d_ff: 16,
        n_v_max: 8,
        n_q_max: 6,
        subtitles: true,
        seed: 11,
        ..ModelConfig::default()
    }
}

/// Seeded base inputs: (visual, subtitle, words, visual2, subtitle2).
fn inputs() -> [Tensor<f64>; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(902);
    [
        Tensor::randn(&[6, N_V], &mut rng),
        Tensor::randn(&[5, N_V], &mut rng),
        Tensor::randn(&[5, N_Q], &mut rng),
        Tensor::randn(&[6, N_V], &mut rng),
        Tensor::randn(&[5, N_V], &mut rng),
    ]
}

/// Overwrites every padded column with large finite garbage.
fn poison(t: &Tensor<f64>, mask: &[bool]) -> Tensor<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = t.clone();
    for r in 0..rows {
        for c in 0..cols {
            if !mask[c] {
                out.data_mut()[r * cols + c] = 1e6 * (1.0 + r as f64) * (1.3 + c as f64);
            }
        }
    }
    out
}

/// Runs the full objective surface for one set of inputs and returns every
/// scalar the model exposes, plus the pooled vectors and distributions.
fn run(model: &Model<f64>, raw: &[Tensor<f64>; 5]) -> Vec<f64> {
    let mut g = Graph::eval();
    let mut s = Session::new(model, &mut g);
    let cv = |s: &mut Session<f64>, t: &Tensor<f64>| -> Var {
        s.g().constant(t.clone()).unwrap()
    };
    let visual = cv(&mut s, &raw[0]);
    let subtitle = cv(&mut s, &raw[1]);
    let words = cv(&mut s, &raw[2]);
    let visual2 = cv(&mut s, &raw[3]);
    let subtitle2 = cv(&mut s, &raw[4]);

    let q = encode_query(&mut s, words, &Q_MASK).unwrap();
    let v = encode_video(&mut s, visual, Some(subtitle), &V_MASK).unwrap();
    let v2 = encode_video(&mut s, visual2, Some(subtitle2), &V_MASK).unwrap();

    let mut out = Vec::new();
    // Pooled query vectors and the valid columns of the frame encodings.
    out.extend_from_slice(s.value(q.q_v).data());
    out.extend_from_slice(s.value(q.q_s.unwrap()).data());
    out.extend_from_slice(s.value(q.q_prime_v).data());
    let h = s.value(v.h_v).clone();
    for c in 0..N_V {
        if V_MASK[c] {
            for r in 0..8 {
                out.push(h.data()[r * N_V + c]);
            }
        }
    }

    // Retrieval similarity and hinge.
    let phi = vr_similarity(&mut s, &q, &v, &V_MASK).unwrap();
    let phi2 = vr_similarity(&mut s, &q, &v2, &V_MASK).unwrap();
    out.push(s.value(phi).item());
    out.push(s.value(phi2).item());
    let hinge = objectives::vr_hinge_loss(&mut s, phi, &[phi2], &[phi2], 0.1).unwrap();
    out.push(s.value(hinge).item());

    // Localization scores, distributions, and loss.
    let scores = ml_scores(&mut s, &q, &v, &V_MASK).unwrap();
    out.extend_from_slice(s.value(scores).data());
    let (ps, pe) = ml_distributions(&mut s, scores, &V_MASK).unwrap();
    out.extend_from_slice(s.value(ps).data());
    out.extend_from_slice(s.value(pe).data());
    let ml = ml_loss(&mut s, ps, pe, (1, 3), &V_MASK).unwrap();
    out.push(s.value(ml).item());

    // Contrastive heads.
    let c1 = contrastive_video_vec(&mut s, v.h_prime_v, &V_MASK, false).unwrap();
    let c1s = contrastive_video_vec(&mut s, v.h_prime_s.unwrap(), &V_MASK, true).unwrap();
    let c2 = contrastive_video_vec(&mut s, v2.h_prime_v, &V_MASK, false).unwrap();
    let c2s = contrastive_video_vec(&mut s, v2.h_prime_s.unwrap(), &V_MASK, true).unwrap();
    out.extend_from_slice(s.value(c1).data());
    let qv = [q.q_v, q.q_v];
    let qs = [q.q_s.unwrap(), q.q_s.unwrap()];
    let vcl = objectives::video_cl_loss(
        &mut s,
        StreamPairs { queries: &qv, videos: &[c1, c2] },
        Some(StreamPairs { queries: &qs, videos: &[c1s, c2s] }),
        &[vec![true, false], vec![false, true]],
    )
    .unwrap();
    out.push(s.value(vcl).item());

    let (fcl, degenerate) = frame_cl_loss(&mut s, &q, &v, (1, 2), &V_MASK).unwrap();
    assert!(!degenerate);
    out.push(s.value(fcl).item());

    let parts = objectives::LossParts {
        vr: Some(hinge),
        ml: Some(ml),
        video_cl: Some(vcl),
        frame_cl: Some(fcl),
    };
    let total = objectives::total_loss(&mut s, &parts).unwrap();
    out.push(s.value(total).item());
    out
}

#[test]
fn padded_positions_are_inert_end_to_end() {
    let model: Model<f64> = Model::new(cfg()).unwrap();
    let raw = inputs();
    let poisoned = [
        poison(&raw[0], &V_MASK),
        poison(&raw[1], &V_MASK),
        poison(&raw[2], &Q_MASK),
        poison(&raw[3], &V_MASK),
        poison(&raw[4], &V_MASK),
    ];
    let clean = run(&model, &raw);
    let dirty = run(&model, &poisoned);
    assert_eq!(clean.len(), dirty.len());
    let mut worst = 0.0f64;
    for (i, (a, b)) in clean.iter().zip(&dirty).enumerate() {
        assert!(a.is_finite() && b.is_finite(), "non-finite value at {i}: {a} vs {b}");
        worst = worst.max((a - b).abs());
    }
    assert!(worst <= 1e-6, "padding leaked into valid outputs: max diff {worst}");
}

#[test]
fn forward_pass_is_deterministic_in_eval_mode() {
    let model: Model<f64> = Model::new(cfg()).unwrap();
    let raw = inputs();
    let a = run(&model, &raw);
    let b = run(&model, &raw);
    // Same model, same inputs, fresh graphs: bitwise identical outputs.
    assert_eq!(a, b);
}

#[test]
fn seeded_dropout_makes_training_forward_reproducible() {
    let model: Model<f64> = Model::new(cfg()).unwrap();
    let raw = inputs();
    let once = |seed: u64| -> Vec<f64> {
        let mut g = Graph::train(seed);
        let mut s = Session::new(&model, &mut g);
        let words = s.g().constant(raw[2].clone()).unwrap();
        let visual = s.g().constant(raw[0].clone()).unwrap();
        let subtitle = s.g().constant(raw[1].clone()).unwrap();
        let q = encode_query(&mut s, words, &Q_MASK).unwrap();
        let v = encode_video(&mut s, visual, Some(subtitle), &V_MASK).unwrap();
        let phi = vr_similarity(&mut s, &q, &v, &V_MASK).unwrap();
        vec![s.value(phi).item()]
    };
    assert_eq!(once(5), once(5));
    assert_ne!(once(5), once(6), "different dropout seeds should perturb the forward pass");
}
