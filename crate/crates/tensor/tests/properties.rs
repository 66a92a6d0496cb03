//! Property-based invariants for the tensor graph and optimizer.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcmr_tensor::graph::Graph;
use vcmr_tensor::{AdamW, AdamWConfig, Tensor};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Masked softmax: valid entries form a distribution, masked entries are
    /// exactly zero, regardless of the (possibly extreme) padded values.
    #[test]
    fn masked_softmax_is_distribution(
        data in finite_vec(8),
        mask_bits in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(mask_bits.iter().any(|&b| b));
        let mut g: Graph<f64> = Graph::eval();
        let x = g.leaf(Tensor::from_vec(&[8], data).unwrap(), true).unwrap();
        let y = g.masked_softmax(x, &mask_bits).unwrap();
        let out = g.value(y).data().to_vec();
        let mut total = 0.0;
        for (i, &m) in mask_bits.iter().enumerate() {
            if m {
                prop_assert!(out[i] >= 0.0);
                total += out[i];
            } else {
                prop_assert_eq!(out[i], 0.0);
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-9, "sum = {}", total);
    }

    /// Masked softmax is invariant to the values stored at masked positions.
    #[test]
    fn masked_softmax_ignores_padding(
        data in finite_vec(6),
        junk in finite_vec(6),
        mask_bits in prop::collection::vec(any::<bool>(), 6),
    ) {
        prop_assume!(mask_bits.iter().any(|&b| b));
        let mut altered = data.clone();
        for i in 0..6 {
            if !mask_bits[i] {
                altered[i] = junk[i];
            }
        }
        let run = |vals: Vec<f64>| {
            let mut g: Graph<f64> = Graph::eval();
            let x = g.leaf(Tensor::from_vec(&[6], vals).unwrap(), true).unwrap();
            let y = g.masked_softmax(x, &mask_bits).unwrap();
            g.value(y).data().to_vec()
        };
        prop_assert_eq!(run(data), run(altered));
    }

    /// Layer norm with unit gain and zero bias produces zero-mean columns
    /// with population variance close to one.
    #[test]
    fn layer_norm_standardizes_columns(data in finite_vec(12)) {
        let spread = data.chunks(4).all(|col| {
            let mean = col.iter().sum::<f64>() / 4.0;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0 > 1e-3
        });
        prop_assume!(spread);
        let mut g: Graph<f64> = Graph::eval();
        let x = g.leaf(Tensor::from_vec(&[4, 3], data).unwrap(), true).unwrap();
        let gain = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm_cols(x, gain, bias, 1e-5).unwrap();
        let out = g.value(y);
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| out.at2(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            prop_assert!(mean.abs() < 1e-9, "mean = {}", mean);
            prop_assert!((var - 1.0).abs() < 1e-2, "var = {}", var);
        }
    }

    /// l2-normalized columns have unit norm (away from the zero-norm clamp).
    #[test]
    fn l2_normalize_gives_unit_columns(data in prop::collection::vec(0.5f64..50.0, 12)) {
        let mut g: Graph<f64> = Graph::eval();
        let x = g.leaf(Tensor::from_vec(&[4, 3], data).unwrap(), true).unwrap();
        let y = g.l2_normalize_cols(x).unwrap();
        let out = g.value(y);
        for j in 0..3 {
            let norm: f64 = (0..4).map(|i| out.at2(i, j).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9, "norm = {}", norm);
        }
    }

    /// Matrix multiplication by the identity is exact.
    #[test]
    fn matmul_identity_is_exact(data in finite_vec(12)) {
        let mut g: Graph<f64> = Graph::eval();
        let a = g.leaf(Tensor::from_vec(&[3, 4], data.clone()).unwrap(), true).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let id = g.constant(eye).unwrap();
        let y = g.matmul(id, a).unwrap();
        prop_assert_eq!(g.value(y).data().to_vec(), data);
    }

    /// logsumexp dominates the max and is bounded by max + ln(count).
    #[test]
    fn logsumexp_bounds(data in finite_vec(9)) {
        let mut g: Graph<f64> = Graph::eval();
        let x = g.leaf(Tensor::from_vec(&[9], data.clone()).unwrap(), true).unwrap();
        let y = g.logsumexp(x, None).unwrap();
        let out = g.value(y).item();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out >= max - 1e-12);
        prop_assert!(out <= max + (9.0f64).ln() + 1e-12);
    }

    /// masked_max equals the plain maximum over the valid entries and
    /// masked_mean their arithmetic mean.
    #[test]
    fn masked_reductions_match_reference(
        data in finite_vec(7),
        mask_bits in prop::collection::vec(any::<bool>(), 7),
    ) {
        prop_assume!(mask_bits.iter().any(|&b| b));
        let mut g: Graph<f64> = Graph::eval();
        let x = g.leaf(Tensor::from_vec(&[7], data.clone()).unwrap(), true).unwrap();
        let mx = g.masked_max(x, &mask_bits).unwrap();
        let mn = g.masked_mean(x, &mask_bits).unwrap();
        let valid: Vec<f64> = data
            .iter()
            .zip(&mask_bits)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        let want_max = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want_mean = valid.iter().sum::<f64>() / valid.len() as f64;
        prop_assert_eq!(g.value(mx).item(), want_max);
        prop_assert!((g.value(mn).item() - want_mean).abs() < 1e-12);
    }

    /// Forward and backward are bitwise deterministic given equal inputs,
    /// including under dropout with a fixed seed.
    #[test]
    fn graph_is_deterministic(data in finite_vec(12), seed in any::<u64>()) {
        let run = || {
            let mut g: Graph<f64> = Graph::train(seed);
            let x = g.leaf(Tensor::from_vec(&[4, 3], data.clone()).unwrap(), true).unwrap();
            let d = g.dropout(x, 0.3).unwrap();
            let s = g.softplus(d).unwrap();
            let loss = g.sum_all(s).unwrap();
            let val = g.value(loss).item();
            let grads = g.backward(loss).unwrap();
            (val, grads.get(x).unwrap().data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&g1), bits(&g2));
    }

    /// AdamW updates are bitwise deterministic and leave the parameter shape
    /// untouched.
    #[test]
    fn adamw_is_deterministic(data in finite_vec(6), grad in finite_vec(6)) {
        let run = || {
            let cfg = AdamWConfig { total_steps: 10, ..AdamWConfig::default() };
            let mut opt: AdamW<f64> = AdamW::new(cfg, &[vec![6]]).unwrap();
            let mut params = [Tensor::from_vec(&[6], data.clone()).unwrap()];
            let grads = [Tensor::from_vec(&[6], grad.clone()).unwrap()];
            for _ in 0..3 {
                opt.step(&mut params, &grads).unwrap();
            }
            params[0].data().to_vec()
        };
        let (a, b) = (run(), run());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}

/// Dropout in training mode zeroes a fraction of entries and rescales the
/// rest; in eval mode it is the identity.
#[test]
fn dropout_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let t = Tensor::<f64>::randn(&[16, 16], &mut rng);

    let mut ge: Graph<f64> = Graph::eval();
    let xe = ge.leaf(t.clone(), true).unwrap();
    let ye = ge.dropout(xe, 0.5).unwrap();
    assert_eq!(ge.value(ye).data(), t.data(), "eval dropout must be identity");

    let mut gt: Graph<f64> = Graph::train(99);
    let xt = gt.leaf(t.clone(), true).unwrap();
    let yt = gt.dropout(xt, 0.5).unwrap();
    let out = gt.value(yt);
    let kept: Vec<usize> = (0..t.numel()).filter(|&i| out.data()[i] != 0.0).collect();
    assert!(!kept.is_empty() && kept.len() < t.numel(), "mask must be nontrivial");
    for &i in &kept {
        let ratio = out.data()[i] / t.data()[i];
        assert!((ratio - 2.0).abs() < 1e-12, "kept entries scale by 1/(1-rate)");
    }
    let frac = kept.len() as f64 / t.numel() as f64;
    assert!((frac - 0.5).abs() < 0.15, "keep fraction {} far from 0.5", frac);
}
