//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as an append-only list of nodes, so
//! append order is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse, accumulating gradients additively wherever a value
//! fans out into several consumers. A graph can be differentiated at most
//! once; a second call is a usage error.
//!
//! Conventions used throughout:
//!
//! * matrices are row-major, and a "column" of a `[d, n]` matrix is one of
//!   the `n` feature vectors;
//! * masks are `&[bool]` with `true` marking real (unmasked) positions;
//! * masked positions receive exactly zero probability / weight and exactly
//!   zero gradient;
//! * every operation validates shapes eagerly and checks its output for
//!   NaN/infinity — non-finite values are an error state, not a warning.

use crate::tensor::{Scalar, Tensor};
use crate::{Result, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Gradients of one scalar output with respect to grad-requiring leaves,
/// keyed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

enum Op<T> {
    Leaf { requires_grad: bool },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddN { inputs: Vec<Var> },
    Scale { a: Var, k: T },
    AddScalar { a: Var },
    Relu { a: Var },
    Softplus { a: Var },
    Ln { a: Var },
    AddBiasCols { a: Var, bias: Var },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    MaskedSoftmax { a: Var, valid: Vec<bool> },
    LayerNormCols { a: Var, gain: Var, bias: Var, eps: T },
    Conv1d { x: Var, kernels: Var },
    Dropout { a: Var, keep: Vec<bool>, scale: T },
    L2NormalizeCols { a: Var, norms: Vec<T> },
    MaskedMax { a: Var, argmax: usize },
    MaskedMean { a: Var, valid: Vec<bool>, count: usize },
    SumAll { a: Var },
    LogSumExp { a: Var, mask: Option<Vec<bool>> },
    Select { a: Var, index: usize },
    Reshape { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass; see the module docs.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    train: bool,
    rng: Option<ChaCha8Rng>,
    signature: u64,
    zero_norm_columns: u64,
}

/// Norm floor used when normalizing feature columns, matching the guard on
/// cosine scores: `max(‖x‖, 1e-12)`.
pub const NORM_FLOOR: f64 = 1e-12;

const SIG_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn sig_fold(sig: u64, word: u64) -> u64 {
    (sig ^ word).wrapping_mul(0x0000_0100_0000_01b3)
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity, everything else is
    /// unchanged. Gradients are still available (used by gradient checks).
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            train: false,
            rng: None,
            signature: SIG_SEED,
            zero_norm_columns: 0,
        }
    }

    /// Training-mode graph; `dropout_seed` drives the dropout masks.
    pub fn train(dropout_seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            train: true,
            rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            signature: SIG_SEED,
            zero_norm_columns: 0,
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of the discrete decisions taken during the forward pass (ReLU
    /// activation patterns and max argmaxes). Two forward passes that differ
    /// here straddle a kink of the piecewise-linear parts of the function.
    pub fn activation_signature(&self) -> u64 {
        self.signature
    }

    /// How many columns hit the `1e-12` norm floor during normalization.
    pub fn zero_norm_columns(&self) -> u64 {
        self.zero_norm_columns
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ── node plumbing ───────────────────────────────────────────────────

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, opname: &'static str, value: Tensor<T>, op: Op<T>, needs: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: opname });
        }
        self.nodes.push(Node { value, op, needs_grad: needs });
        Ok(Var(self.nodes.len() - 1))
    }

    fn want_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(TensorError::Dimension {
                op,
                detail: format!("expected rank {rank}, got shape {:?}", self.shape(v)),
            });
        }
        Ok(())
    }

    fn want_mask_len(op: &'static str, mask: &[bool], len: usize) -> Result<()> {
        if mask.len() != len {
            return Err(TensorError::Dimension {
                op,
                detail: format!("mask length {} does not match {}", mask.len(), len),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::Domain { op, detail: "all positions masked".into() });
        }
        Ok(())
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Insert a value as a leaf. Grad-requiring leaves appear in the result
    /// of [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf { requires_grad }, requires_grad)
    }

    /// A leaf that never requires gradients (inputs, masks, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    // ── arithmetic ──────────────────────────────────────────────────────

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_rank("matmul", a, 2)?;
        self.want_rank("matmul", b, 2)?;
        let (m, ka) = (self.shape(a)[0], self.shape(a)[1]);
        let (kb, n) = (self.shape(b)[0], self.shape(b)[1]);
        if ka != kb {
            return Err(TensorError::Dimension {
                op: "matmul",
                detail: format!("inner dims differ: [{m}, {ka}] · [{kb}, {n}]"),
            });
        }
        let mut out = vec![T::zero(); m * n];
        crate::kernels::matmul_acc(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_vec(&[m, n], out)?, Op::Matmul { a, b }, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.want_rank("transpose", a, 2)?;
        let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        self.push("transpose", Tensor::from_vec(&[c, r], out)?, Op::Transpose { a }, needs)
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension {
                op: opname,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(opname, Tensor::from_vec(&shape, data)?, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::Config {
            op: "add_n",
            detail: "empty input list".into(),
        })?;
        let shape = self.shape(first).to_vec();
        let mut data = self.value(first).data().to_vec();
        for &v in &inputs[1..] {
            if self.shape(v) != shape {
                return Err(TensorError::Dimension {
                    op: "add_n",
                    detail: format!("{:?} vs {:?}", self.shape(v), shape),
                });
            }
            for (acc, x) in data.iter_mut().zip(self.value(v).data()) {
                *acc = *acc + *x;
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push("add_n", Tensor::from_vec(&shape, data)?, Op::AddN { inputs: inputs.to_vec() }, needs)
    }

    fn unary(
        &mut self,
        opname: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(opname, Tensor::from_vec(&shape, data)?, op, needs)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        self.unary("scale", a, |x| x * k, Op::Scale { a, k })
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + k, Op::AddScalar { a })
    }

    /// `max(0, x)`. At exactly zero the subgradient 0 is used (the first of
    /// the two tied branches).
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut sig = self.signature;
        let mut word = 0u64;
        for (i, &x) in self.value(a).data().iter().enumerate() {
            word = (word << 1) | u64::from(x > T::zero());
            if i % 64 == 63 {
                sig = sig_fold(sig, word);
                word = 0;
            }
        }
        self.signature = sig_fold(sig, word);
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    /// Numerically stable `log(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let f = |x: T| {
            let pos = if x > T::zero() { x } else { T::zero() };
            pos + (-x.abs()).exp().ln_1p()
        };
        self.unary("softplus", a, f, Op::Softplus { a })
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(TensorError::Domain {
                op: "ln",
                detail: "input must be strictly positive".into(),
            });
        }
        self.unary("ln", a, |x| x.ln(), Op::Ln { a })
    }

    /// `x + b` broadcasting a length-`d` bias over the columns of `x: [d, n]`.
    pub fn add_bias_cols(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.want_rank("add_bias_cols", a, 2)?;
        self.want_rank("add_bias_cols", bias, 1)?;
        let (d, n) = (self.shape(a)[0], self.shape(a)[1]);
        if self.shape(bias)[0] != d {
            return Err(TensorError::Dimension {
                op: "add_bias_cols",
                detail: format!("bias length {} vs {} rows", self.shape(bias)[0], d),
            });
        }
        let x = self.value(a).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); d * n];
        for i in 0..d {
            let bi = b[i];
            for j in 0..n {
                out[i * n + j] = x[i * n + j] + bi;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push("add_bias_cols", Tensor::from_vec(&[d, n], out)?, Op::AddBiasCols { a, bias }, needs)
    }

    // ── slicing and concatenation ───────────────────────────────────────

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.want_rank("slice_rows", a, 2)?;
        let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
        if start + len > r || len == 0 {
            return Err(TensorError::Dimension {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {r}", start + len),
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(a);
        self.push("slice_rows", Tensor::from_vec(&[len, c], data)?, Op::SliceRows { a, start }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Config {
            op: "concat_rows",
            detail: "empty part list".into(),
        })?;
        self.want_rank("concat_rows", first, 2)?;
        let c = self.shape(first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            self.want_rank("concat_rows", p, 2)?;
            if self.shape(p)[1] != c {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {}", self.shape(p)[1], c),
                });
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&v| self.needs(v));
        self.push("concat_rows", Tensor::from_vec(&[rows, c], data)?, Op::ConcatRows { parts: parts.to_vec() }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.want_rank("slice_cols", a, 2)?;
        let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
        if start + len > c || len == 0 {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {c}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        self.push("slice_cols", Tensor::from_vec(&[r, len], data)?, Op::SliceCols { a, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Config {
            op: "concat_cols",
            detail: "empty part list".into(),
        })?;
        self.want_rank("concat_cols", first, 2)?;
        let r = self.shape(first)[0];
        let mut cols = 0;
        for &p in parts {
            self.want_rank("concat_cols", p, 2)?;
            if self.shape(p)[0] != r {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", self.shape(p)[0], r),
                });
            }
            cols += self.shape(p)[1];
        }
        let mut data = vec![T::zero(); r * cols];
        let mut at = 0;
        for &p in parts {
            let pc = self.shape(p)[1];
            let src = self.value(p).data();
            for i in 0..r {
                data[i * cols + at..i * cols + at + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            at += pc;
        }
        let needs = parts.iter().any(|&v| self.needs(v));
        self.push("concat_cols", Tensor::from_vec(&[r, cols], data)?, Op::ConcatCols { parts: parts.to_vec() }, needs)
    }

    // ── normalization and reductions ────────────────────────────────────

    /// Softmax restricted to unmasked entries, with max-subtraction for
    /// stability. Masked entries get exactly zero probability and gradient.
    ///
    /// * rank 1 `[n]`: one distribution over the `n` entries; `valid` has
    ///   length `n`;
    /// * rank 2 `[k, n]`: one distribution per column over the `k` rows;
    ///   `valid` has length `k`.
    ///
    /// Masking every position is a domain error.
    pub fn masked_softmax(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let x = self.value(a).data();
        let out = match shape.len() {
            1 => {
                Self::want_mask_len("masked_softmax", valid, shape[0])?;
                let mut out = vec![T::zero(); shape[0]];
                softmax_strided(x, &mut out, valid, 1, 0);
                out
            }
            2 => {
                Self::want_mask_len("masked_softmax", valid, shape[0])?;
                let (_, n) = (shape[0], shape[1]);
                let mut out = vec![T::zero(); x.len()];
                for j in 0..n {
                    softmax_strided(x, &mut out, valid, n, j);
                }
                out
            }
            _ => {
                return Err(TensorError::Dimension {
                    op: "masked_softmax",
                    detail: format!("expected rank 1 or 2, got {shape:?}"),
                })
            }
        };
        let needs = self.needs(a);
        self.push(
            "masked_softmax",
            Tensor::from_vec(&shape, out)?,
            Op::MaskedSoftmax { a, valid: valid.to_vec() },
            needs,
        )
    }

    /// Per-column layer normalization of `x: [d, n]` with an affine map:
    /// each column is shifted to zero mean and scaled by the reciprocal of
    /// `sqrt(population variance + eps)`, then multiplied by `gain` and
    /// shifted by `bias` (both length `d`).
    pub fn layer_norm_cols(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.want_rank("layer_norm", a, 2)?;
        self.want_rank("layer_norm", gain, 1)?;
        self.want_rank("layer_norm", bias, 1)?;
        let (d, n) = (self.shape(a)[0], self.shape(a)[1]);
        if self.shape(gain)[0] != d || self.shape(bias)[0] != d {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                detail: format!(
                    "gain/bias lengths {}/{} vs {} rows",
                    self.shape(gain)[0],
                    self.shape(bias)[0],
                    d
                ),
            });
        }
        if eps < T::zero() {
            return Err(TensorError::Config { op: "layer_norm", detail: "eps must be >= 0".into() });
        }
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); d * n];
        let dd = T::from_f64(d as f64);
        for j in 0..n {
            let (mu, inv) = column_stats(x, d, n, j, eps, dd);
            for i in 0..d {
                let xhat = (x[i * n + j] - mu) * inv;
                out[i * n + j] = xhat * g[i] + b[i];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            Tensor::from_vec(&[d, n], out)?,
            Op::LayerNormCols { a, gain, bias, eps },
            needs,
        )
    }

    /// 1-D cross-correlation of `x: [c_in, n]` with `kernels:
    /// [c_out, c_in, w]`, zero-padded by `(w-1)/2` on both sides so the
    /// output is `[c_out, n]`. The width must be odd.
    pub fn conv1d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        self.want_rank("conv1d", x, 2)?;
        if self.shape(kernels).len() != 3 {
            return Err(TensorError::Dimension {
                op: "conv1d",
                detail: format!("kernels must be rank 3, got {:?}", self.shape(kernels)),
            });
        }
        let (c_in, n) = (self.shape(x)[0], self.shape(x)[1]);
        let (c_out, kc_in, w) = (
            self.shape(kernels)[0],
            self.shape(kernels)[1],
            self.shape(kernels)[2],
        );
        if kc_in != c_in {
            return Err(TensorError::Dimension {
                op: "conv1d",
                detail: format!("kernel expects {kc_in} input channels, input has {c_in}"),
            });
        }
        if w % 2 == 0 {
            return Err(TensorError::Config {
                op: "conv1d",
                detail: format!("kernel width must be odd, got {w}"),
            });
        }
        let pad = (w - 1) / 2;
        let xv = self.value(x).data();
        let kv = self.value(kernels).data();
        let mut out = vec![T::zero(); c_out * n];
        for o in 0..c_out {
            for ci in 0..c_in {
                let krow = &kv[(o * c_in + ci) * w..(o * c_in + ci + 1) * w];
                let xrow = &xv[ci * n..(ci + 1) * n];
                let orow = &mut out[o * n..(o + 1) * n];
                for (u, &kw) in krow.iter().enumerate() {
                    // output position t reads input position t + u - pad
                    let lo = pad.saturating_sub(u);
                    let hi = if u >= pad { n.saturating_sub(u - pad) } else { n };
                    for t in lo..hi {
                        orow[t] = orow[t] + kw * xrow[t + u - pad];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernels);
        self.push("conv1d", Tensor::from_vec(&[c_out, n], out)?, Op::Conv1d { x, kernels }, needs)
    }

    /// Inverted dropout. In evaluation mode (or with `rate == 0`) this is the
    /// identity and records nothing; in training mode each element is kept
    /// with probability `1 - rate` and scaled by `1/(1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config {
                op: "dropout",
                detail: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= rate).collect();
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let x = self.value(a).data();
        let data: Vec<T> = x
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push("dropout", Tensor::from_vec(&shape, data)?, Op::Dropout { a, keep, scale }, needs)
    }

    /// Normalize each column of `x: [d, n]` to unit Euclidean length, with
    /// the norm clamped below by `1e-12`. Columns that hit the clamp are
    /// counted in [`Graph::zero_norm_columns`].
    pub fn l2_normalize_cols(&mut self, a: Var) -> Result<Var> {
        self.want_rank("l2_normalize", a, 2)?;
        let (d, n) = (self.shape(a)[0], self.shape(a)[1]);
        let x = self.value(a).data();
        let floor = T::from_f64(NORM_FLOOR);
        let mut out = vec![T::zero(); d * n];
        let mut norms = vec![T::zero(); n];
        let mut flagged = 0u64;
        for j in 0..n {
            let mut ss = T::zero();
            for i in 0..d {
                let v = x[i * n + j];
                ss = ss + v * v;
            }
            let norm = ss.sqrt();
            let r = if norm > floor {
                norm
            } else {
                flagged += 1;
                floor
            };
            norms[j] = r;
            for i in 0..d {
                out[i * n + j] = x[i * n + j] / r;
            }
        }
        self.zero_norm_columns += flagged;
        let needs = self.needs(a);
        self.push("l2_normalize", Tensor::from_vec(&[d, n], out)?, Op::L2NormalizeCols { a, norms }, needs)
    }

    /// Maximum over unmasked entries of a rank-1 tensor. Ties resolve to the
    /// earliest index, which also receives the whole subgradient.
    pub fn masked_max(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        self.want_rank("masked_max", a, 1)?;
        Self::want_mask_len("masked_max", valid, self.shape(a)[0])?;
        let x = self.value(a).data();
        let mut best: Option<(usize, T)> = None;
        for (i, (&v, &ok)) in x.iter().zip(valid).enumerate() {
            if ok && best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (argmax, value) = best.expect("mask has at least one true entry");
        self.signature = sig_fold(self.signature, argmax as u64);
        let needs = self.needs(a);
        self.push("masked_max", Tensor::scalar(value), Op::MaskedMax { a, argmax }, needs)
    }

    /// Mean over unmasked entries of a rank-1 tensor.
    pub fn masked_mean(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        self.want_rank("masked_mean", a, 1)?;
        Self::want_mask_len("masked_mean", valid, self.shape(a)[0])?;
        let x = self.value(a).data();
        let count = valid.iter().filter(|&&m| m).count();
        let mut sum = T::zero();
        for (&v, &ok) in x.iter().zip(valid) {
            if ok {
                sum = sum + v;
            }
        }
        let value = sum / T::from_f64(count as f64);
        let needs = self.needs(a);
        self.push("masked_mean", Tensor::scalar(value), Op::MaskedMean { a, valid: valid.to_vec(), count }, needs)
    }

    /// Sum of all elements.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut sum = T::zero();
        for &v in self.value(a).data() {
            sum = sum + v;
        }
        let needs = self.needs(a);
        self.push("sum_all", Tensor::scalar(sum), Op::SumAll { a }, needs)
    }

    /// `log Σ exp(x_i)` over all elements, or over `mask`-selected elements
    /// (flattened order), computed with max-subtraction.
    pub fn logsumexp(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a).data();
        if let Some(m) = mask {
            Self::want_mask_len("logsumexp", m, x.len())?;
        }
        let included = |i: usize| mask.map_or(true, |m| m[i]);
        let mut mx = T::neg_infinity();
        for (i, &v) in x.iter().enumerate() {
            if included(i) && v > mx {
                mx = v;
            }
        }
        let mut s = T::zero();
        for (i, &v) in x.iter().enumerate() {
            if included(i) {
                s = s + (v - mx).exp();
            }
        }
        let value = mx + s.ln();
        let needs = self.needs(a);
        self.push(
            "logsumexp",
            Tensor::scalar(value),
            Op::LogSumExp { a, mask: mask.map(|m| m.to_vec()) },
            needs,
        )
    }

    /// Pick one entry of a rank-1 tensor as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        self.want_rank("select", a, 1)?;
        let n = self.shape(a)[0];
        if index >= n {
            return Err(TensorError::Dimension {
                op: "select",
                detail: format!("index {index} out of range for length {n}"),
            });
        }
        let value = self.value(a).data()[index];
        let needs = self.needs(a);
        self.push("select", Tensor::scalar(value), Op::Select { a, index }, needs)
    }

    /// View under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        self.push("reshape", value, Op::Reshape { a }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Differentiate the scalar `loss` with respect to every grad-requiring
    /// leaf. Consumes the graph's capacity to differentiate: a second call is
    /// a usage error. Gradients accumulate additively across fan-out, and two
    /// runs over identical graphs produce bitwise-identical results.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::Usage(
                "backward called twice on the same graph".into(),
            ));
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients { map: HashMap::new() };
        if !self.needs(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            self.backprop_node(id, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        // Lazily allocate an accumulation buffer for an input node.
        macro_rules! buf {
            ($v:expr) => {{
                let vid = $v.0;
                if grads[vid].is_none() {
                    grads[vid] = Some(vec![T::zero(); self.nodes[vid].value.numel()]);
                }
                grads[vid].as_mut().unwrap()
            }};
        }
        macro_rules! skip_unless_needed {
            ($v:expr) => {
                if !self.needs($v) {
                    return Ok(());
                }
            };
        }

        match &self.nodes[id].op {
            Op::Leaf { requires_grad } => {
                if *requires_grad {
                    let t = Tensor::from_vec(self.nodes[id].value.shape(), g.to_vec())?;
                    out.map.insert(id, t);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA += dC · Bᵀ
                    let bv = self.value(*b).data().to_vec();
                    crate::kernels::matmul_nt_acc(buf!(*a), g, &bv, m, n, k);
                }
                if self.needs(*b) {
                    // dB += Aᵀ · dC
                    let av = self.value(*a).data().to_vec();
                    crate::kernels::matmul_tn_acc(buf!(*b), &av, g, k, m, n);
                }
            }
            Op::Transpose { a } => {
                skip_unless_needed!(*a);
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = buf!(*a);
                for i in 0..c {
                    for j in 0..r {
                        ga[j * c + i] = ga[j * c + i] + g[i * r + j];
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    axpy(buf!(*a), g, T::one());
                }
                if self.needs(*b) {
                    axpy(buf!(*b), g, T::one());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    axpy(buf!(*a), g, T::one());
                }
                if self.needs(*b) {
                    axpy(buf!(*b), g, -T::one());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = buf!(*a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = buf!(*b);
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::AddN { inputs } => {
                for &v in inputs {
                    if self.needs(v) {
                        axpy(buf!(v), g, T::one());
                    }
                }
            }
            Op::Scale { a, k } => {
                skip_unless_needed!(*a);
                axpy(buf!(*a), g, *k);
            }
            Op::AddScalar { a } => {
                skip_unless_needed!(*a);
                axpy(buf!(*a), g, T::one());
            }
            Op::Relu { a } => {
                skip_unless_needed!(*a);
                let x = self.value(*a).data();
                let ga = buf!(*a);
                for i in 0..g.len() {
                    if x[i] > T::zero() {
                        ga[i] = ga[i] + g[i];
                    }
                }
            }
            Op::Softplus { a } => {
                skip_unless_needed!(*a);
                let x = self.value(*a).data();
                let ga = buf!(*a);
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * sigmoid(x[i]);
                }
            }
            Op::Ln { a } => {
                skip_unless_needed!(*a);
                let x = self.value(*a).data();
                let ga = buf!(*a);
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] / x[i];
                }
            }
            Op::AddBiasCols { a, bias } => {
                let (d, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if self.needs(*a) {
                    axpy(buf!(*a), g, T::one());
                }
                if self.needs(*bias) {
                    let gb = buf!(*bias);
                    for i in 0..d {
                        let mut s = T::zero();
                        for j in 0..n {
                            s = s + g[i * n + j];
                        }
                        gb[i] = gb[i] + s;
                    }
                }
            }
            Op::SliceRows { a, start } => {
                skip_unless_needed!(*a);
                let c = self.shape(*a)[1];
                let ga = buf!(*a);
                axpy(&mut ga[start * c..start * c + g.len()], g, T::one());
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.needs(p) {
                        axpy(buf!(p), &g[at..at + len], T::one());
                    }
                    at += len;
                }
            }
            Op::SliceCols { a, start } => {
                skip_unless_needed!(*a);
                let c = self.shape(*a)[1];
                let out_c = self.nodes[id].value.shape()[1];
                let r = self.shape(*a)[0];
                let ga = buf!(*a);
                for i in 0..r {
                    for j in 0..out_c {
                        ga[i * c + start + j] = ga[i * c + start + j] + g[i * out_c + j];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let cols = self.nodes[id].value.shape()[1];
                let r = self.nodes[id].value.shape()[0];
                let mut at = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let gp = buf!(p);
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] = gp[i * pc + j] + g[i * cols + at + j];
                            }
                        }
                    }
                    at += pc;
                }
            }
            Op::MaskedSoftmax { a, valid } => {
                skip_unless_needed!(*a);
                let y = self.nodes[id].value.data();
                let shape = self.nodes[id].value.shape();
                let (rows, cols) = if shape.len() == 1 { (shape[0], 1) } else { (shape[0], shape[1]) };
                let ga = buf!(*a);
                for j in 0..cols {
                    let mut dot = T::zero();
                    for (i, &ok) in valid.iter().enumerate().take(rows) {
                        if ok {
                            dot = dot + y[i * cols + j] * g[i * cols + j];
                        }
                    }
                    for (i, &ok) in valid.iter().enumerate().take(rows) {
                        if ok {
                            let idx = i * cols + j;
                            ga[idx] = ga[idx] + y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNormCols { a, gain, bias, eps } => {
                let (d, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let x = self.value(*a).data();
                let gn = self.value(*gain).data();
                let dd = T::from_f64(d as f64);
                for j in 0..n {
                    let (mu, inv) = column_stats(x, d, n, j, *eps, dd);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..d {
                        let xhat = (x[i * n + j] - mu) * inv;
                        let dxhat = g[i * n + j] * gn[i];
                        m1 = m1 + dxhat;
                        m2 = m2 + dxhat * xhat;
                    }
                    m1 = m1 / dd;
                    m2 = m2 / dd;
                    if self.needs(*a) {
                        let ga = buf!(*a);
                        for i in 0..d {
                            let xhat = (x[i * n + j] - mu) * inv;
                            let dxhat = g[i * n + j] * gn[i];
                            ga[i * n + j] = ga[i * n + j] + inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                if self.needs(*gain) {
                    let gg = buf!(*gain);
                    for j in 0..n {
                        let (mu, inv) = column_stats(x, d, n, j, *eps, dd);
                        for i in 0..d {
                            let xhat = (x[i * n + j] - mu) * inv;
                            gg[i] = gg[i] + g[i * n + j] * xhat;
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = buf!(*bias);
                    for i in 0..d {
                        for j in 0..n {
                            gb[i] = gb[i] + g[i * n + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, kernels } => {
                let (c_in, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (c_out, _, w) = (
                    self.shape(*kernels)[0],
                    self.shape(*kernels)[1],
                    self.shape(*kernels)[2],
                );
                let pad = (w - 1) / 2;
                let xv = self.value(*x).data();
                let kv = self.value(*kernels).data();
                if self.needs(*x) {
                    let gx = buf!(*x);
                    for o in 0..c_out {
                        for ci in 0..c_in {
                            let krow = &kv[(o * c_in + ci) * w..(o * c_in + ci + 1) * w];
                            for (u, &kw) in krow.iter().enumerate() {
                                let lo = pad.saturating_sub(u);
                                let hi = if u >= pad { n.saturating_sub(u - pad) } else { n };
                                for t in lo..hi {
                                    let xi = ci * n + t + u - pad;
                                    gx[xi] = gx[xi] + g[o * n + t] * kw;
                                }
                            }
                        }
                    }
                }
                if self.needs(*kernels) {
                    let gk = buf!(*kernels);
                    for o in 0..c_out {
                        for ci in 0..c_in {
                            for u in 0..w {
                                let lo = pad.saturating_sub(u);
                                let hi = if u >= pad { n.saturating_sub(u - pad) } else { n };
                                let mut s = T::zero();
                                for t in lo..hi {
                                    s = s + g[o * n + t] * xv[ci * n + t + u - pad];
                                }
                                let ki = (o * c_in + ci) * w + u;
                                gk[ki] = gk[ki] + s;
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, keep, scale } => {
                skip_unless_needed!(*a);
                let ga = buf!(*a);
                for i in 0..g.len() {
                    if keep[i] {
                        ga[i] = ga[i] + g[i] * *scale;
                    }
                }
            }
            Op::L2NormalizeCols { a, norms } => {
                skip_unless_needed!(*a);
                let (d, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let y = self.nodes[id].value.data();
                let floor = T::from_f64(NORM_FLOOR);
                let ga = buf!(*a);
                for j in 0..n {
                    let r = norms[j];
                    if r > floor {
                        let mut dot = T::zero();
                        for i in 0..d {
                            dot = dot + y[i * n + j] * g[i * n + j];
                        }
                        for i in 0..d {
                            let idx = i * n + j;
                            ga[idx] = ga[idx] + (g[idx] - y[idx] * dot) / r;
                        }
                    } else {
                        // Clamped column: the norm is treated as a constant.
                        for i in 0..d {
                            let idx = i * n + j;
                            ga[idx] = ga[idx] + g[idx] / r;
                        }
                    }
                }
            }
            Op::MaskedMax { a, argmax } => {
                skip_unless_needed!(*a);
                let ga = buf!(*a);
                ga[*argmax] = ga[*argmax] + g[0];
            }
            Op::MaskedMean { a, valid, count } => {
                skip_unless_needed!(*a);
                let share = g[0] / T::from_f64(*count as f64);
                let ga = buf!(*a);
                for (i, &ok) in valid.iter().enumerate() {
                    if ok {
                        ga[i] = ga[i] + share;
                    }
                }
            }
            Op::SumAll { a } => {
                skip_unless_needed!(*a);
                let ga = buf!(*a);
                for v in ga.iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::LogSumExp { a, mask } => {
                skip_unless_needed!(*a);
                let x = self.value(*a).data();
                let lse = self.nodes[id].value.item();
                let ga = buf!(*a);
                for i in 0..x.len() {
                    if mask.as_ref().map_or(true, |m| m[i]) {
                        ga[i] = ga[i] + g[0] * (x[i] - lse).exp();
                    }
                }
            }
            Op::Select { a, index } => {
                skip_unless_needed!(*a);
                let ga = buf!(*a);
                ga[*index] = ga[*index] + g[0];
            }
            Op::Reshape { a } => {
                skip_unless_needed!(*a);
                axpy(buf!(*a), g, T::one());
            }
        }
        Ok(())
    }
}

/// `acc += k * g`, elementwise.
fn axpy<T: Scalar>(acc: &mut [T], g: &[T], k: T) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + k * b;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean and reciprocal standard deviation (population variance + eps) of
/// column `j` of a `[d, n]` matrix.
fn column_stats<T: Scalar>(x: &[T], d: usize, n: usize, j: usize, eps: T, dd: T) -> (T, T) {
    let mut mu = T::zero();
    for i in 0..d {
        mu = mu + x[i * n + j];
    }
    mu = mu / dd;
    let mut var = T::zero();
    for i in 0..d {
        let dv = x[i * n + j] - mu;
        var = var + dv * dv;
    }
    var = var / dd;
    (mu, T::one() / (var + eps).sqrt())
}

/// Masked, max-subtracted softmax over one strided slice (`cols == stride`,
/// column `offset`). Writes zeros at masked positions.
fn softmax_strided<T: Scalar>(x: &[T], out: &mut [T], valid: &[bool], stride: usize, offset: usize) {
    let mut mx = T::neg_infinity();
    for (i, &ok) in valid.iter().enumerate() {
        if ok {
            let v = x[i * stride + offset];
            if v > mx {
                mx = v;
            }
        }
    }
    let mut sum = T::zero();
    for (i, &ok) in valid.iter().enumerate() {
        if ok {
            let e = (x[i * stride + offset] - mx).exp();
            out[i * stride + offset] = e;
            sum = sum + e;
        }
    }
    for (i, &ok) in valid.iter().enumerate() {
        if ok {
            out[i * stride + offset] = out[i * stride + offset] / sum;
        }
    }
}
