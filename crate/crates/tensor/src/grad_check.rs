//! Central-difference gradient checking.
//!
//! The check runs entirely in `f64`: the analytic gradient comes from one
//! [`Graph::backward`] pass, the numerical one from two forward evaluations
//! per element. Elements whose `±h` evaluations land on different sides of a
//! kink (different ReLU activation pattern or max argmax) are excluded from
//! the comparison and reported, since a secant across a kink does not
//! estimate either one-sided derivative.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over the compared elements
    /// (`|g_ad - g_fd| / max(1e-6, |g_ad| + |g_fd|)`). The denominator floor
    /// sits two orders of magnitude above the central-difference roundoff
    /// scale (`ε·|f| / 2h ≈ 1e-12` for unit-scale outputs at `h = 1e-4`), so
    /// elements whose true gradient is zero report the noise honestly as a
    /// tiny relative error instead of an alarm.
    pub max_rel_err: f64,
    /// Element index attaining `max_rel_err`, if any element was compared.
    pub worst_index: Option<usize>,
    /// Analytic and numerical gradient at the worst element.
    pub worst_pair: (f64, f64),
    /// Number of compared elements.
    pub checked: usize,
    /// Number of elements excluded for straddling a kink.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn eval_once<F>(f: &F, point: &Tensor<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::eval();
    let x = g.leaf(point.clone(), false)?;
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(TensorError::Usage(
            "gradient_check needs a scalar-valued function".into(),
        ));
    }
    Ok((g.value(y).item(), g.activation_signature()))
}

/// Compare the backward-pass gradient of `f` at `point` against central
/// differences with step `h`, elementwise.
pub fn gradient_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::Config {
            op: "gradient_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let mut g = Graph::eval();
    let x = g.leaf(point.clone(), true)?;
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(TensorError::Usage(
            "gradient_check needs a scalar-valued function".into(),
        ));
    }
    let mut grads = g.backward(y)?;
    // A function may not depend on x at all; its gradient is zero.
    let g_ad = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        worst_pair: (0.0, 0.0),
        checked: 0,
        excluded: 0,
    };
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let plus = eval_once(&f, &Tensor::from_vec(point.shape(), data.clone())?)?;
        data[i] = orig - h;
        let minus = eval_once(&f, &Tensor::from_vec(point.shape(), data.clone())?)?;
        data[i] = orig;

        if plus.1 != minus.1 {
            report.excluded += 1;
            continue;
        }
        let fd = (plus.0 - minus.0) / (2.0 * h);
        let ad = g_ad.data()[i];
        let rel = (ad - fd).abs() / f64::max(1e-6, ad.abs() + fd.abs());
        report.checked += 1;
        if rel > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
            report.worst_pair = (ad, fd);
        }
    }
    Ok(report)
}
