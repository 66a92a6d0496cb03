//! Central-difference gradient checks of every training objective with
//! respect to the full parameter vector, run through the same `bind_flat`
//! plumbing the optimizer uses. Elements straddling a ReLU or argmax kink
//! are excluded by the checker itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcmr_model::objectives::{self, StreamPairs};
use vcmr_model::{encode_query, encode_video, EncodedQuery, EncodedVideo, Model, ModelConfig, Session};
use vcmr_tensor::grad_check::gradient_check;
use vcmr_tensor::graph::{Graph, Var};
use vcmr_tensor::{Tensor, TensorError};

const N_V: usize = 4;
const N_Q: usize = 3;
const V_MASK: [bool; N_V] = [true, true, true, false];
const Q_MASK: [bool; N_Q] = [true, true, false];
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-4;

fn cfg() -> ModelConfig {
    ModelConfig {
        d: 4,
        d_v: 3,
        d_w: 3,
        heads: 2,
        d_ff: 8,
        n_v_max: 5,
        n_q_max: 3,
        conv_width: 3,
        subtitles: true,
        seed: 23,
        ..ModelConfig::default()
    }
}

struct Fixture {
    words: [Tensor<f64>; 2],
    visual: [Tensor<f64>; 2],
    subtitle: [Tensor<f64>; 2],
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(413);
    Fixture {
        words: [Tensor::randn(&[3, N_Q], &mut rng), Tensor::randn(&[3, N_Q], &mut rng)],
        visual: [Tensor::randn(&[3, N_V], &mut rng), Tensor::randn(&[3, N_V], &mut rng)],
        subtitle: [Tensor::randn(&[3, N_V], &mut rng), Tensor::randn(&[3, N_V], &mut rng)],
    }
}

fn encode_pair(
    s: &mut Session<f64>,
    fx: &Fixture,
    i: usize,
) -> vcmr_model::Result<(EncodedQuery, EncodedVideo)> {
    let words = s.g().constant(fx.words[i].clone())?;
    let visual = s.g().constant(fx.visual[i].clone())?;
    let subtitle = s.g().constant(fx.subtitle[i].clone())?;
    let q = encode_query(s, words, &Q_MASK)?;
    let v = encode_video(s, visual, Some(subtitle), &V_MASK)?;
    Ok((q, v))
}

/// Runs the checker over the whole flattened parameter vector for one
/// objective builder.
fn check_objective<F>(name: &str, build: F)
where
    F: Fn(&mut Session<f64>, &Fixture) -> vcmr_model::Result<Var>,
{
    let model: Model<f64> = Model::new(cfg()).unwrap();
    let fx = fixture();
    let point = model.params.flatten();
    let report = gradient_check(
        |g, x| {
            let mut s = Session::new(&model, g);
            s.bind_flat(x).map_err(|e| TensorError::Usage(e.to_string()))?;
            build(&mut s, &fx).map_err(|e| TensorError::Usage(e.to_string()))
        },
        &point,
        STEP,
    )
    .unwrap();
    assert!(report.checked > 0, "{name}: nothing compared");
    assert!(
        report.passes(TOL),
        "{name}: rel err {} at element {:?} (analytic {}, numeric {}), {} checked / {} excluded",
        report.max_rel_err,
        report.worst_index,
        report.worst_pair.0,
        report.worst_pair.1,
        report.checked,
        report.excluded,
    );
}

#[test]
fn retrieval_hinge_gradients() {
    check_objective("vr", |s, fx| {
        let (q1, v1) = encode_pair(s, fx, 0)?;
        let (q2, v2) = encode_pair(s, fx, 1)?;
        let phi_pos = objectives::vr_similarity(s, &q1, &v1, &V_MASK)?;
        let phi_qn = objectives::vr_similarity(s, &q2, &v1, &V_MASK)?;
        let phi_vn = objectives::vr_similarity(s, &q1, &v2, &V_MASK)?;
        objectives::vr_hinge_loss(s, phi_pos, &[phi_qn], &[phi_vn], 0.1)
    });
}

#[test]
fn moment_localization_gradients() {
    check_objective("ml", |s, fx| {
        let (q, v) = encode_pair(s, fx, 0)?;
        let scores = objectives::ml_scores(s, &q, &v, &V_MASK)?;
        let (ps, pe) = objectives::ml_distributions(s, scores, &V_MASK)?;
        objectives::ml_loss(s, ps, pe, (0, 2), &V_MASK)
    });
}

#[test]
fn video_contrastive_gradients() {
    check_objective("video_cl", |s, fx| {
        let (q1, v1) = encode_pair(s, fx, 0)?;
        let (q2, v2) = encode_pair(s, fx, 1)?;
        let c1 = objectives::contrastive_video_vec(s, v1.h_prime_v, &V_MASK, false)?;
        let c2 = objectives::contrastive_video_vec(s, v2.h_prime_v, &V_MASK, false)?;
        let c1s = objectives::contrastive_video_vec(s, v1.h_prime_s.unwrap(), &V_MASK, true)?;
        let c2s = objectives::contrastive_video_vec(s, v2.h_prime_s.unwrap(), &V_MASK, true)?;
        objectives::video_cl_loss(
            s,
            StreamPairs { queries: &[q1.q_v, q2.q_v], videos: &[c1, c2] },
            Some(StreamPairs {
                queries: &[q1.q_s.unwrap(), q2.q_s.unwrap()],
                videos: &[c1s, c2s],
            }),
            &[vec![true, false], vec![false, true]],
        )
    });
}

#[test]
fn frame_contrastive_gradients() {
    check_objective("frame_cl", |s, fx| {
        let (q, v) = encode_pair(s, fx, 0)?;
        let (loss, _) = objectives::frame_cl_loss(s, &q, &v, (1, 2), &V_MASK)?;
        Ok(loss)
    });
}

#[test]
fn combined_loss_gradients() {
    check_objective("total", |s, fx| {
        let (q1, v1) = encode_pair(s, fx, 0)?;
        let (q2, v2) = encode_pair(s, fx, 1)?;
        let phi_pos = objectives::vr_similarity(s, &q1, &v1, &V_MASK)?;
        let phi_qn = objectives::vr_similarity(s, &q2, &v1, &V_MASK)?;
        let phi_vn = objectives::vr_similarity(s, &q1, &v2, &V_MASK)?;
        let vr = objectives::vr_hinge_loss(s, phi_pos, &[phi_qn], &[phi_vn], 0.1)?;

        let scores = objectives::ml_scores(s, &q1, &v1, &V_MASK)?;
        let (ps, pe) = objectives::ml_distributions(s, scores, &V_MASK)?;
        let ml = objectives::ml_loss(s, ps, pe, (1, 2), &V_MASK)?;

        let c1 = objectives::contrastive_video_vec(s, v1.h_prime_v, &V_MASK, false)?;
        let c2 = objectives::contrastive_video_vec(s, v2.h_prime_v, &V_MASK, false)?;
        let c1s = objectives::contrastive_video_vec(s, v1.h_prime_s.unwrap(), &V_MASK, true)?;
        let c2s = objectives::contrastive_video_vec(s, v2.h_prime_s.unwrap(), &V_MASK, true)?;
        let vcl = objectives::video_cl_loss(
            s,
            StreamPairs { queries: &[q1.q_v, q2.q_v], videos: &[c1, c2] },
            Some(StreamPairs {
                queries: &[q1.q_s.unwrap(), q2.q_s.unwrap()],
                videos: &[c1s, c2s],
            }),
            &[vec![true, false], vec![false, true]],
        )?;
        let (fcl, _) = objectives::frame_cl_loss(s, &q1, &v1, (1, 2), &V_MASK)?;

        let parts = objectives::LossParts {
            vr: Some(vr),
            ml: Some(ml),
            video_cl: Some(vcl),
            frame_cl: Some(fcl),
        };
        objectives::total_loss(s, &parts)
    });
}
