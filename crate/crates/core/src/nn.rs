//! Small dense building blocks shared by the encoder, the MLP baseline and
//! the trainer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

/// Affine map `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform fan-in initialization in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = if in_dim == 0 { 0.0 } else { 1.0 / (in_dim as f64).sqrt() };
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        });
        Self { weight, bias: Array1::zeros(out_dim) }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Array2::zeros((out_dim, in_dim)), bias: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-wise application to `x` of shape `rows x in`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients for a row-wise forward and returns the
    /// gradient with respect to the input rows.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        grad_out: ArrayView2<'_, f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        self.accumulate(x, grad_out, grad);
        grad_out.dot(&self.weight)
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>, grad: &mut Linear) {
        grad.weight += &grad_out.t().dot(&x);
        grad.bias += &grad_out.sum_axis(Axis(0));
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), slice(&self.weight));
        f(&format!("{prefix}.bias"), self.bias.as_slice().expect("contiguous bias"));
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_slice_mut().expect("contiguous weight"));
        f(&format!("{prefix}.bias"), self.bias.as_slice_mut().expect("contiguous bias"));
    }
}

pub(crate) fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// What the backward pass needs from a layer-norm forward.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Array1::ones(dim), bias: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *s;
        }
        let out = &normalized * &self.gain + &self.bias;
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        grad_out: ArrayView2<'_, f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gain += &(&grad_out * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &grad_out.sum_axis(Axis(0));
        let d = grad_out.ncols() as f64;
        let mut grad_in = &grad_out * &self.gain;
        for ((mut g, xhat), &s) in
            grad_in.rows_mut().into_iter().zip(cache.normalized.rows()).zip(&cache.inv_std)
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            for (gi, &xi) in g.iter_mut().zip(xhat.iter()) {
                *gi = s * (*gi - mean_g - xi * mean_gx);
            }
        }
        grad_in
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.gain"), self.gain.as_slice().expect("contiguous"));
        f(&format!("{prefix}.bias"), self.bias.as_slice().expect("contiguous"));
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.gain"), self.gain.as_slice_mut().expect("contiguous"));
        f(&format!("{prefix}.bias"), self.bias.as_slice_mut().expect("contiguous"));
    }
}

/// A collection of named tensors that can be flattened, zeroed and updated.
pub trait Parameters: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `(name, offset, len)` for every tensor, in visiting order.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit(&mut |name, t| {
            out.push((name.to_string(), offset, t.len()));
            offset += t.len();
        });
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::attention::MultiHeadWeights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn multi_head(d_model: usize, seed: u64) -> MultiHeadWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = || {
            let mut l = Linear::init(d_model, d_model, &mut rng);
            l.bias.mapv_inplace(|_| 0.0);
            l
        };
        let (query, key, value, mut output) = (layer(), layer(), layer(), layer());
        output.bias.fill(0.1);
        MultiHeadWeights { query, key, value, output }
    }
}
