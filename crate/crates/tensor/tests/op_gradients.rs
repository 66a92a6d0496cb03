//! Central-difference gradient checks for every differentiable operation,
//! at ten random points each, in f64.
//!
//! Outputs are reduced to a scalar by contraction against a fixed random
//! tensor so that every output element influences the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcmr_tensor::grad_check::gradient_check;
use vcmr_tensor::graph::{Graph, Var};
use vcmr_tensor::{Result, Tensor};

const TOL: f64 = 1e-4;
const H: f64 = 1e-4;
const TRIALS: usize = 10;

/// Contract `v` against a deterministic pseudo-random tensor of its shape.
fn contract(g: &mut Graph<f64>, v: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ salt);
    let r = g.constant(Tensor::randn(&shape, &mut rng))?;
    let prod = g.mul(v, r)?;
    g.sum_all(prod)
}

/// Run the ten-point check for one op. `point_of` maps a standard-normal
/// draw to the input distribution the op needs (e.g. strictly positive).
fn check_op(
    name: &str,
    shape: &[usize],
    point_of: impl Fn(Tensor<f64>) -> Tensor<f64>,
    build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(vcmr_tensor::seed::derive(41, name, 0));
    for trial in 0..TRIALS {
        let point = point_of(Tensor::randn(shape, &mut rng));
        let report = gradient_check(&build, &point, H).unwrap();
        assert!(
            report.passes(TOL),
            "{name} trial {trial}: max rel err {} at {:?} (ad, fd) = {:?}",
            report.max_rel_err,
            report.worst_index,
            report.worst_pair,
        );
        assert!(report.checked > 0, "{name} trial {trial}: nothing compared");
    }
}

fn ident(t: Tensor<f64>) -> Tensor<f64> {
    t
}

#[test]
fn matmul_wrt_left_and_right() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let right = Tensor::randn(&[4, 3], &mut rng);
    let left = Tensor::randn(&[3, 4], &mut rng);
    check_op("matmul_left", &[3, 4], ident, move |g, x| {
        let b = g.constant(right.clone())?;
        let y = g.matmul(x, b)?;
        contract(g, y, 1)
    });
    check_op("matmul_right", &[4, 5], ident, move |g, x| {
        let a = g.constant(left.clone())?;
        let y = g.matmul(a, x)?;
        contract(g, y, 2)
    });
}

#[test]
fn transpose_op() {
    check_op("transpose", &[3, 5], ident, |g, x| {
        let y = g.transpose(x)?;
        contract(g, y, 3)
    });
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let other = Tensor::randn(&[2, 4], &mut rng);
    for (name, salt) in [("add", 4u64), ("sub", 5), ("mul", 6)] {
        let oc = other.clone();
        check_op(name, &[2, 4], ident, move |g, x| {
            let b = g.constant(oc.clone())?;
            let y = match name {
                "add" => g.add(x, b)?,
                "sub" => g.sub(x, b)?,
                _ => g.mul(x, b)?,
            };
            contract(g, y, salt)
        });
    }
}

#[test]
fn add_n_fans_gradient_to_all_terms() {
    check_op("add_n", &[3, 2], ident, |g, x| {
        // x appears twice: gradient contributions must accumulate.
        let y = g.add_n(&[x, x, x])?;
        contract(g, y, 7)
    });
}

#[test]
fn scalar_ops() {
    check_op("scale", &[6], ident, |g, x| {
        let y = g.scale(x, -2.5)?;
        contract(g, y, 8)
    });
    check_op("add_scalar", &[6], ident, |g, x| {
        let y = g.add_scalar(x, 0.75)?;
        contract(g, y, 9)
    });
}

#[test]
fn relu_away_from_kinks() {
    check_op("relu", &[12], ident, |g, x| {
        let y = g.relu(x)?;
        contract(g, y, 10)
    });
}

#[test]
fn softplus_op() {
    check_op("softplus", &[12], ident, |g, x| {
        let y = g.softplus(x)?;
        contract(g, y, 11)
    });
}

#[test]
fn ln_on_positive_inputs() {
    let positive = |t: Tensor<f64>| {
        let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
        Tensor::from_vec(t.shape(), data).unwrap()
    };
    check_op("ln", &[8], positive, |g, x| {
        let y = g.ln(x)?;
        contract(g, y, 12)
    });
}

#[test]
fn add_bias_cols_wrt_matrix_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bias = Tensor::randn(&[3], &mut rng);
    let mat = Tensor::randn(&[3, 5], &mut rng);
    let bc = bias.clone();
    check_op("add_bias_cols_matrix", &[3, 5], ident, move |g, x| {
        let b = g.constant(bc.clone())?;
        let y = g.add_bias_cols(x, b)?;
        contract(g, y, 13)
    });
    check_op("add_bias_cols_bias", &[3], ident, move |g, x| {
        let a = g.constant(mat.clone())?;
        let y = g.add_bias_cols(a, x)?;
        contract(g, y, 14)
    });
}

#[test]
fn slicing_and_concatenation() {
    check_op("slice_rows", &[6, 3], ident, |g, x| {
        let y = g.slice_rows(x, 1, 3)?;
        contract(g, y, 15)
    });
    check_op("slice_cols", &[3, 7], ident, |g, x| {
        let y = g.slice_cols(x, 2, 4)?;
        contract(g, y, 16)
    });
    check_op("concat_rows", &[2, 3], ident, |g, x| {
        let y = g.concat_rows(&[x, x])?;
        contract(g, y, 17)
    });
    check_op("concat_cols", &[3, 2], ident, |g, x| {
        let y = g.concat_cols(&[x, x])?;
        contract(g, y, 18)
    });
}

#[test]
fn masked_softmax_rank1_and_rank2() {
    let mask1 = [true, false, true, true, true, false];
    check_op("masked_softmax_vec", &[6], ident, move |g, x| {
        let y = g.masked_softmax(x, &mask1)?;
        contract(g, y, 19)
    });
    let mask2 = [true, true, false, true];
    check_op("masked_softmax_cols", &[4, 3], ident, move |g, x| {
        let y = g.masked_softmax(x, &mask2)?;
        contract(g, y, 20)
    });
}

#[test]
fn layer_norm_wrt_input_gain_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gain = Tensor::randn(&[4], &mut rng);
    let bias = Tensor::randn(&[4], &mut rng);
    let x0 = Tensor::randn(&[4, 3], &mut rng);
    {
        let (gc, bc) = (gain.clone(), bias.clone());
        check_op("layer_norm_input", &[4, 3], ident, move |g, x| {
            let gn = g.constant(gc.clone())?;
            let bs = g.constant(bc.clone())?;
            let y = g.layer_norm_cols(x, gn, bs, 1e-5)?;
            contract(g, y, 21)
        });
    }
    {
        let (xc, bc) = (x0.clone(), bias.clone());
        check_op("layer_norm_gain", &[4], ident, move |g, x| {
            let a = g.constant(xc.clone())?;
            let bs = g.constant(bc.clone())?;
            let y = g.layer_norm_cols(a, x, bs, 1e-5)?;
            contract(g, y, 22)
        });
    }
    check_op("layer_norm_bias", &[4], ident, move |g, x| {
        let a = g.constant(x0.clone())?;
        let gn = g.constant(gain.clone())?;
        let y = g.layer_norm_cols(a, gn, x, 1e-5)?;
        contract(g, y, 23)
    });
}

#[test]
fn conv1d_wrt_input_and_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kernels = Tensor::randn(&[2, 3, 5], &mut rng);
    let x0 = Tensor::randn(&[3, 9], &mut rng);
    let kc = kernels.clone();
    check_op("conv1d_input", &[3, 9], ident, move |g, x| {
        let k = g.constant(kc.clone())?;
        let y = g.conv1d(x, k)?;
        contract(g, y, 24)
    });
    check_op("conv1d_kernels", &[2, 3, 5], ident, move |g, x| {
        let a = g.constant(x0.clone())?;
        let y = g.conv1d(a, x)?;
        contract(g, y, 25)
    });
}

#[test]
fn l2_normalize_cols_op() {
    check_op("l2_normalize", &[5, 4], ident, |g, x| {
        let y = g.l2_normalize_cols(x)?;
        contract(g, y, 26)
    });
}

#[test]
fn reductions_and_picks() {
    let mask = [true, true, false, true, true, true];
    check_op("masked_max", &[6], ident, move |g, x| g.masked_max(x, &mask));
    check_op("masked_mean", &[6], ident, move |g, x| g.masked_mean(x, &mask));
    check_op("sum_all", &[3, 3], ident, |g, x| g.sum_all(x));
    check_op("logsumexp", &[7], ident, |g, x| g.logsumexp(x, None));
    check_op("logsumexp_masked", &[7], ident, move |g, x| {
        g.logsumexp(x, Some(&[true, false, true, true, false, true, true]))
    });
    check_op("select", &[5], ident, |g, x| g.select(x, 3));
}

#[test]
fn reshape_op() {
    check_op("reshape", &[2, 6], ident, |g, x| {
        let y = g.reshape(x, &[3, 4])?;
        contract(g, y, 27)
    });
}

#[test]
fn composite_chain_of_ops() {
    // A deeper composition exercising accumulation across several op kinds.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = Tensor::randn(&[4, 4], &mut rng);
    let gain = Tensor::full(&[4], 1.0);
    let bias = Tensor::zeros(&[4]);
    let mask = [true, true, true, false, true];
    check_op("composite", &[4, 5], ident, move |g, x| {
        let wv = g.constant(w.clone())?;
        let gn = g.constant(gain.clone())?;
        let bs = g.constant(bias.clone())?;
        let h = g.matmul(wv, x)?;
        let h = g.layer_norm_cols(h, gn, bs, 1e-5)?;
        let h = g.softplus(h)?;
        let s = g.masked_softmax(h, &[true, true, true, true])?;
        let row = g.slice_rows(s, 1, 1)?;
        let flat = g.reshape(row, &[5])?;
        g.masked_mean(flat, &mask)
    });
}
