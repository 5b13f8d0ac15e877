//! Scaled dot-product attention: unmasked, densely masked, and a sparse
//! masked kernel that evaluates only the unmasked query/key pairs.
//!
//! All kernels are split into two stages: computing the row-stochastic
//! weight matrix `P`, and the dense product `P V`. The weight stage is where
//! the dense and sparse kernels differ. Both stages report executed
//! operations to a [`Tally`]; [`NoTally`] compiles the hooks away.

use std::borrow::Cow;

use ndarray::{s, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::graph::AttentionMask;
use crate::nn::Linear;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {0} has no attendable entry")]
    EmptyRow(usize),
    #[error("d_model {d_model} is not divisible by {heads} heads")]
    IndivisibleHeads { d_model: usize, heads: usize },
}

/// Query, key and value matrices, all `n x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
}

impl AttentionInput {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self, AttentionError> {
        if q.dim() != k.dim() || q.dim() != v.dim() {
            return Err(AttentionError::Shape(format!(
                "q {:?}, k {:?}, v {:?}",
                q.dim(),
                k.dim(),
                v.dim()
            )));
        }
        if q.nrows() == 0 || q.ncols() == 0 {
            return Err(AttentionError::Shape(format!("empty input {:?}", q.dim())));
        }
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if !m.iter().all(|x| x.is_finite()) {
                return Err(AttentionError::NonFinite(name));
            }
        }
        Ok(Self { q, k, v })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.q.ncols()
    }

    pub fn q(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn k(&self) -> &Array2<f64> {
        &self.k
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn v_mut(&mut self) -> &mut Array2<f64> {
        &mut self.v
    }
}

/// Additive logit bias with entries in `R ∪ {-inf}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix(Array2<f64>);

impl BiasMatrix {
    pub fn new(bias: Array2<f64>) -> Result<Self, AttentionError> {
        if bias.nrows() != bias.ncols() {
            return Err(AttentionError::Shape(format!("bias {:?} is not square", bias.dim())));
        }
        if bias.iter().any(|&b| b.is_nan() || b == f64::INFINITY) {
            return Err(AttentionError::NonFinite("B"));
        }
        for (i, row) in bias.rows().into_iter().enumerate() {
            if row.iter().all(|&b| b == f64::NEG_INFINITY) {
                return Err(AttentionError::EmptyRow(i));
            }
        }
        Ok(Self(bias))
    }

    /// `0` where the mask is 1 and `-inf` where it is 0.
    pub fn from_mask(mask: &AttentionMask) -> Self {
        let n = mask.n();
        Self(Array2::from_shape_fn((n, n), |(i, j)| {
            if mask.get(i, j) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Array2::zeros((n, n)))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Qk,
    Softmax,
    Av,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Mul,
    Add,
    Div,
    Exp,
    Sqrt,
}

/// Receives counts of executed floating-point operations.
pub trait Tally {
    fn record(&mut self, stage: Stage, op: Op, count: u64);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoTally;

impl Tally for NoTally {
    #[inline(always)]
    fn record(&mut self, _: Stage, _: Op, _: u64) {}
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounts {
    pub mul: u64,
    pub add: u64,
    pub div: u64,
    pub exp: u64,
    pub sqrt: u64,
}

impl OpCounts {
    /// Weighted FLOPs: exponentiations cost `c2`, square roots `c1`.
    pub fn flops(&self, c1: u64, c2: u64) -> u64 {
        self.mul + self.add + self.div + c2 * self.exp + c1 * self.sqrt
    }
}

/// Per-stage operation counts for one forward call.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct StageTally {
    pub qk: OpCounts,
    pub softmax: OpCounts,
    pub av: OpCounts,
}

impl Tally for StageTally {
    fn record(&mut self, stage: Stage, op: Op, count: u64) {
        let counts = match stage {
            Stage::Qk => &mut self.qk,
            Stage::Softmax => &mut self.softmax,
            Stage::Av => &mut self.av,
        };
        match op {
            Op::Mul => counts.mul += count,
            Op::Add => counts.add += count,
            Op::Div => counts.div += count,
            Op::Exp => counts.exp += count,
            Op::Sqrt => counts.sqrt += count,
        }
    }
}

/// Mask in row-compressed form: for each query, the unmasked key columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowCompressedMask {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl RowCompressedMask {
    pub fn new(mask: &AttentionMask) -> Self {
        let n = mask.n();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(mask.nonzeros());
        row_ptr.push(0);
        for i in 0..n {
            cols.extend(mask.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j));
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn nonzeros(&self) -> usize {
        self.cols.len()
    }
}

impl From<&AttentionMask> for RowCompressedMask {
    fn from(mask: &AttentionMask) -> Self {
        Self::new(mask)
    }
}

/// How logits are adjusted in the dense kernel.
#[derive(Debug, Clone, Copy)]
pub enum Logits<'a> {
    Plain,
    Masked(&'a AttentionMask),
    Biased(ArrayView2<'a, f64>),
}

/// Stand-in for `-inf` inside the dense kernel; exponentiates to exactly 0
/// after max subtraction without producing NaN.
pub const MASKED_LOGIT: f64 = f64::MIN;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Stabilized softmax in place. Max subtraction is not counted.
#[inline]
fn softmax_in_place<T: Tally>(row: &mut [f64], tally: &mut T) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (idx, x) in row.iter_mut().enumerate() {
        *x = (*x - max).exp();
        if idx == 0 {
            sum = *x;
        } else {
            sum += *x;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    let r = row.len() as u64;
    tally.record(Stage::Softmax, Op::Exp, r);
    tally.record(Stage::Softmax, Op::Add, r - 1);
    tally.record(Stage::Softmax, Op::Div, r);
}

fn standard<'a>(m: ArrayView2<'a, f64>) -> Cow<'a, [f64]> {
    match m.to_slice() {
        Some(s) => Cow::Borrowed(s),
        None => Cow::Owned(m.iter().copied().collect()),
    }
}

/// Dense weight stage: all `n^2` logits, masked pairs forced to
/// [`MASKED_LOGIT`], softmax over the full row.
pub fn dense_weights<T: Tally>(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    logits: Logits<'_>,
    tally: &mut T,
) -> Array2<f64> {
    let (n, d) = q.dim();
    let qs = standard(q);
    let ks = standard(k);
    let scale = (d as f64).sqrt();
    tally.record(Stage::Qk, Op::Sqrt, 1);
    let mut weights = Array2::<f64>::zeros((n, n));
    let out = weights.as_slice_mut().expect("fresh array is contiguous");
    for i in 0..n {
        let qi = &qs[i * d..(i + 1) * d];
        let row = &mut out[i * n..(i + 1) * n];
        for (j, slot) in row.iter_mut().enumerate() {
            let s = dot(qi, &ks[j * d..(j + 1) * d]) / scale;
            *slot = match logits {
                Logits::Plain => s,
                Logits::Masked(mask) => {
                    if mask.get(i, j) {
                        s
                    } else {
                        MASKED_LOGIT
                    }
                }
                Logits::Biased(bias) => {
                    let b = bias[[i, j]];
                    if b == f64::NEG_INFINITY {
                        MASKED_LOGIT
                    } else {
                        s + b
                    }
                }
            };
        }
        let n64 = n as u64;
        tally.record(Stage::Qk, Op::Mul, n64 * d as u64);
        tally.record(Stage::Qk, Op::Add, n64 * (d as u64 - 1));
        tally.record(Stage::Qk, Op::Div, n64);
        if let Logits::Biased(bias) = logits {
            let finite = bias.row(i).iter().filter(|b| b.is_finite()).count() as u64;
            tally.record(Stage::Qk, Op::Add, finite);
        }
        softmax_in_place(row, tally);
    }
    weights
}

/// Sparse weight stage: logits and softmax only over unmasked pairs. The
/// returned matrix is dense with exact zeros at masked positions.
pub fn sparse_weights<T: Tally>(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    mask: &RowCompressedMask,
    tally: &mut T,
) -> Array2<f64> {
    let (n, d) = q.dim();
    let qs = standard(q);
    let ks = standard(k);
    let scale = (d as f64).sqrt();
    tally.record(Stage::Qk, Op::Sqrt, 1);
    let mut weights = Array2::<f64>::zeros((n, n));
    let out = weights.as_slice_mut().expect("fresh array is contiguous");
    let mut buf = Vec::with_capacity(n);
    for i in 0..n {
        let qi = &qs[i * d..(i + 1) * d];
        let cols = mask.row(i);
        buf.clear();
        buf.extend(cols.iter().map(|&j| dot(qi, &ks[j * d..(j + 1) * d]) / scale));
        let r = cols.len() as u64;
        tally.record(Stage::Qk, Op::Mul, r * d as u64);
        tally.record(Stage::Qk, Op::Add, r * (d as u64 - 1));
        tally.record(Stage::Qk, Op::Div, r);
        softmax_in_place(&mut buf, tally);
        let row = &mut out[i * n..(i + 1) * n];
        for (&j, &w) in cols.iter().zip(&buf) {
            row[j] = w;
        }
    }
    weights
}

/// Dense product `P V`: `n` multiplications and `n - 1` additions per output
/// entry.
pub fn apply_weights<T: Tally>(
    weights: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    tally: &mut T,
) -> Array2<f64> {
    let (n, d) = v.dim();
    let ws = standard(weights);
    let vs = standard(v);
    let mut out = Array2::<f64>::zeros((n, d));
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    for i in 0..n {
        let oi = &mut os[i * d..(i + 1) * d];
        let wi = &ws[i * n..(i + 1) * n];
        let w0 = wi[0];
        for (o, &x) in oi.iter_mut().zip(&vs[..d]) {
            *o = w0 * x;
        }
        for j in 1..n {
            let w = wi[j];
            for (o, &x) in oi.iter_mut().zip(&vs[j * d..(j + 1) * d]) {
                *o += w * x;
            }
        }
    }
    let (n64, d64) = (n as u64, d as u64);
    tally.record(Stage::Av, Op::Mul, n64 * n64 * d64);
    tally.record(Stage::Av, Op::Add, n64 * (n64 - 1) * d64);
    out
}

fn check_mask(input: &AttentionInput, n: usize) -> Result<(), AttentionError> {
    if n != input.n() {
        return Err(AttentionError::Shape(format!("mask is {n}x{n}, input has n={}", input.n())));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn attention(input: &AttentionInput) -> Array2<f64> {
    let w = dense_weights(input.q.view(), input.k.view(), Logits::Plain, &mut NoTally);
    apply_weights(w.view(), input.v.view(), &mut NoTally)
}

/// `softmax(Q K^T / sqrt(d_k) + B) V`.
pub fn biased_attention(
    input: &AttentionInput,
    bias: &BiasMatrix,
) -> Result<Array2<f64>, AttentionError> {
    check_mask(input, bias.n())?;
    let w = dense_weights(input.q.view(), input.k.view(), Logits::Biased(bias.view()), &mut NoTally);
    Ok(apply_weights(w.view(), input.v.view(), &mut NoTally))
}

pub fn dense_masked_attention(
    input: &AttentionInput,
    mask: &AttentionMask,
) -> Result<Array2<f64>, AttentionError> {
    dense_masked_attention_with(input, mask, &mut NoTally)
}

/// Dense masked kernel reporting executed operations to `tally`.
pub fn dense_masked_attention_with<T: Tally>(
    input: &AttentionInput,
    mask: &AttentionMask,
    tally: &mut T,
) -> Result<Array2<f64>, AttentionError> {
    check_mask(input, mask.n())?;
    let w = dense_weights(input.q.view(), input.k.view(), Logits::Masked(mask), tally);
    Ok(apply_weights(w.view(), input.v.view(), tally))
}

pub fn sparse_masked_attention(
    input: &AttentionInput,
    mask: &AttentionMask,
) -> Result<Array2<f64>, AttentionError> {
    sparse_masked_attention_with(input, &RowCompressedMask::new(mask), &mut NoTally)
}

/// Sparse masked kernel over a precomputed row-compressed mask.
pub fn sparse_masked_attention_with<T: Tally>(
    input: &AttentionInput,
    mask: &RowCompressedMask,
    tally: &mut T,
) -> Result<Array2<f64>, AttentionError> {
    check_mask(input, mask.n())?;
    if let Some(i) = (0..mask.n()).find(|&i| mask.row(i).is_empty()) {
        return Err(AttentionError::EmptyRow(i));
    }
    let w = sparse_weights(input.q.view(), input.k.view(), mask, tally);
    Ok(apply_weights(w.view(), input.v.view(), tally))
}

/// Which kernel evaluates masked attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Dense,
    Sparse,
}

/// Projection weights of one multi-head attention block. Each projection is
/// `d_model x d_model`; head `h` owns columns `h*d_h..(h+1)*d_h` of the
/// projected queries, keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadWeights {
    pub fn d_model(&self) -> usize {
        self.query.in_dim()
    }
}

/// Per-head masked attention over projected inputs, concatenated and passed
/// through the output projection. The same mask applies to every head.
pub fn multi_head_masked_attention(
    x: ArrayView2<'_, f64>,
    mask: &AttentionMask,
    weights: &MultiHeadWeights,
    heads: usize,
    kernel: Kernel,
) -> Result<Array2<f64>, AttentionError> {
    let (n, d_model) = x.dim();
    if heads == 0 || d_model % heads != 0 {
        return Err(AttentionError::IndivisibleHeads { d_model, heads });
    }
    if mask.n() != n {
        return Err(AttentionError::Shape(format!("mask is {0}x{0}, input has n={n}", mask.n())));
    }
    if weights.d_model() != d_model {
        return Err(AttentionError::Shape(format!(
            "weights expect d_model={}, input has {d_model}",
            weights.d_model()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(AttentionError::NonFinite("X"));
    }
    let q = weights.query.forward(x);
    let k = weights.key.forward(x);
    let v = weights.value.forward(x);
    let dh = d_model / heads;
    let compressed = match kernel {
        Kernel::Sparse => Some(RowCompressedMask::new(mask)),
        Kernel::Dense => None,
    };
    let mut concat = Array2::<f64>::zeros((n, d_model));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let w = match &compressed {
            Some(rc) => sparse_weights(qh, kh, rc, &mut NoTally),
            None => dense_weights(qh, kh, Logits::Masked(mask), &mut NoTally),
        };
        concat.slice_mut(cols).assign(&apply_weights(w.view(), vh, &mut NoTally));
    }
    Ok(weights.output.forward(concat.view()))
}

/// Row sums of a weight matrix; used by property tests.
pub fn row_sums(weights: &Array2<f64>) -> Vec<f64> {
    weights.sum_axis(Axis(1)).to_vec()
}
