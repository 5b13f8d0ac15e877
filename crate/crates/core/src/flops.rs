//! Analytical FLOP counts for one head, one sample, forward only, and an
//! instrumented counter that runs the real kernels.
//!
//! Density `η` is the fraction of NONZERO mask entries; sparsity `ζ = 1 - η`
//! is the fraction of zeros. Square roots cost `c1` FLOPs and exponentials
//! `c2` FLOPs. Stabilizing max subtraction inside softmax is not counted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    dense_masked_attention_with, sparse_masked_attention_with, AttentionError, AttentionInput,
    RowCompressedMask, StageTally,
};
use crate::graph::{quantized_zero_count, AttentionMask, GraphError};

#[derive(Debug, Error, PartialEq)]
pub enum FlopsError {
    #[error("n and d_k must be positive (n={n}, d_k={d_k})")]
    Dimensions { n: u64, d_k: u64 },
    #[error("{nonzeros} nonzero entries is below the diagonal count n={n}")]
    DensityBelowDiagonal { nonzeros: u64, n: u64 },
    #[error("{nonzeros} nonzero entries exceeds n^2 for n={n}")]
    DensityAboveOne { nonzeros: u64, n: u64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub n: u64,
    pub d_k: u64,
    /// `η n²`, kept as an exact count.
    pub nonzeros: u64,
    pub c1: u64,
    pub c2: u64,
}

impl FlopsModel {
    pub fn new(n: u64, d_k: u64, nonzeros: u64, c1: u64, c2: u64) -> Result<Self, FlopsError> {
        if n == 0 || d_k == 0 {
            return Err(FlopsError::Dimensions { n, d_k });
        }
        if nonzeros < n {
            return Err(FlopsError::DensityBelowDiagonal { nonzeros, n });
        }
        if nonzeros > n * n {
            return Err(FlopsError::DensityAboveOne { nonzeros, n });
        }
        Ok(Self { n, d_k, nonzeros, c1, c2 })
    }

    /// Unmasked (all-ones) model.
    pub fn dense(n: u64, d_k: u64, c1: u64, c2: u64) -> Result<Self, FlopsError> {
        Self::new(n, d_k, n * n, c1, c2)
    }

    pub fn from_mask(mask: &AttentionMask, d_k: u64, c1: u64, c2: u64) -> Result<Self, FlopsError> {
        Self::new(mask.n() as u64, d_k, mask.nonzeros() as u64, c1, c2)
    }

    /// Density rounded to the nearest whole number of nonzero entries.
    pub fn with_density(n: u64, d_k: u64, density: f64, c1: u64, c2: u64) -> Result<Self, FlopsError> {
        let nonzeros = (density * (n * n) as f64).round().max(0.0) as u64;
        Self::new(n, d_k, nonzeros, c1, c2)
    }

    /// Zero fraction quantized the same way random masks are sampled.
    pub fn with_zero_fraction(
        n: u64,
        d_k: u64,
        zero_fraction: f64,
        c1: u64,
        c2: u64,
    ) -> Result<Self, FlopsError> {
        let zeros = quantized_zero_count(n as usize, zero_fraction)? as u64;
        Self::new(n, d_k, n * n - zeros, c1, c2)
    }

    pub fn density(&self) -> f64 {
        self.nonzeros as f64 / (self.n * self.n) as f64
    }

    pub fn zero_fraction(&self) -> f64 {
        1.0 - self.density()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub qk_flops: u64,
    pub softmax_flops: u64,
    pub av_flops: u64,
    pub total: u64,
}

impl FlopsBreakdown {
    pub fn new(qk_flops: u64, softmax_flops: u64, av_flops: u64) -> Self {
        Self { qk_flops, softmax_flops, av_flops, total: qk_flops + softmax_flops + av_flops }
    }
}

fn breakdown(m: &FlopsModel, pairs: u64) -> FlopsBreakdown {
    let (n, d) = (m.n, m.d_k);
    FlopsBreakdown::new(
        2 * pairs * d + m.c1,
        (2 + m.c2) * pairs - n,
        2 * n * n * d - n * d,
    )
}

/// Every query/key pair evaluated; total `4n²d + (2+c2)n² - nd - n + c1`.
pub fn vanilla_flops(model: &FlopsModel) -> FlopsBreakdown {
    breakdown(model, model.n * model.n)
}

/// Only unmasked pairs evaluated; total `(2η+2)n²d + (2+c2)ηn² - nd - n + c1`.
pub fn masked_flops(model: &FlopsModel) -> FlopsBreakdown {
    breakdown(model, model.nonzeros)
}

/// `vanilla / masked` totals evaluated in floating point for a real density.
pub fn flops_ratio(n: f64, d_k: f64, density: f64, c1: f64, c2: f64) -> f64 {
    let vanilla = 4.0 * n * n * d_k + (2.0 + c2) * n * n - n * d_k - n + c1;
    let masked = (2.0 * density + 2.0) * n * n * d_k + (2.0 + c2) * density * n * n - n * d_k - n + c1;
    vanilla / masked
}

/// Limit of `vanilla / masked` as `n → ∞`:
/// `(4d + 2 + c2) / ((2η + 2)d + 2η + η c2)`.
pub fn flops_ratio_limit(d_k: u64, density: f64, c2: f64) -> f64 {
    let d = d_k as f64;
    (4.0 * d + 2.0 + c2) / ((2.0 * density + 2.0) * d + 2.0 * density + density * c2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountedKernel {
    Vanilla,
    Masked,
}

/// Runs the kernel once with counting hooks and weights the tally.
pub fn counted_flops(
    kernel: CountedKernel,
    input: &AttentionInput,
    mask: &AttentionMask,
    c1: u64,
    c2: u64,
) -> Result<FlopsBreakdown, FlopsError> {
    let mut tally = StageTally::default();
    match kernel {
        CountedKernel::Vanilla => {
            dense_masked_attention_with(input, mask, &mut tally)?;
        }
        CountedKernel::Masked => {
            sparse_masked_attention_with(input, &RowCompressedMask::new(mask), &mut tally)?;
        }
    }
    Ok(weigh(&tally, c1, c2))
}

pub fn weigh(tally: &StageTally, c1: u64, c2: u64) -> FlopsBreakdown {
    FlopsBreakdown::new(tally.qk.flops(c1, c2), tally.softmax.flops(c1, c2), tally.av.flops(c1, c2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::random_mask;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(n: usize, d: usize, seed: u64) -> AttentionInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        AttentionInput::new(m(), m(), m()).unwrap()
    }

    #[test]
    fn vanilla_small_cases() {
        for (c1, c2) in [(1, 1), (3, 7), (0, 20)] {
            let b = vanilla_flops(&FlopsModel::dense(1, 1, c1, c2).unwrap());
            assert_eq!(b, FlopsBreakdown::new(2 + c1, 1 + c2, 1));
            assert_eq!(b.total, 4 + c1 + c2);
            let b = vanilla_flops(&FlopsModel::dense(2, 1, c1, c2).unwrap());
            assert_eq!(b.total, 20 + 4 * c2 + c1);
            let counted = counted_flops(
                CountedKernel::Vanilla,
                &input(2, 1, 0),
                &AttentionMask::ones(2),
                c1,
                c2,
            )
            .unwrap();
            assert_eq!(counted, b);
        }
    }

    #[test]
    fn vanilla_grows_quadratically() {
        let t = |n| vanilla_flops(&FlopsModel::dense(n, 64, 1, 1).unwrap()).total as f64;
        let r = t(64) / t(32);
        assert!((r - 4.0).abs() < 0.02, "{r}");
        let r = t(2048) / t(1024);
        assert!((r - 4.0).abs() < 1e-3, "{r}");
    }

    #[test]
    fn identity_mask_qk_stage() {
        let m = FlopsModel::new(4, 2, 4, 1, 1).unwrap();
        assert_eq!(masked_flops(&m).qk_flops, 16 + 1);
        let counted = counted_flops(
            CountedKernel::Masked,
            &input(4, 2, 1),
            &AttentionMask::identity(4),
            1,
            1,
        )
        .unwrap();
        assert_eq!(counted, masked_flops(&m));
        assert!(FlopsModel::new(4, 2, 3, 1, 1).is_err());
    }

    #[test]
    fn full_density_masked_equals_vanilla() {
        let m = FlopsModel::dense(9, 5, 2, 3).unwrap();
        assert_eq!(masked_flops(&m), vanilla_flops(&m));
        let x = input(9, 5, 2);
        let ones = AttentionMask::ones(9);
        assert_eq!(
            counted_flops(CountedKernel::Masked, &x, &ones, 2, 3).unwrap(),
            counted_flops(CountedKernel::Vanilla, &x, &ones, 2, 3).unwrap()
        );
    }

    #[test]
    fn sparse_setting_saves_flops() {
        let m = FlopsModel::with_density(32, 64, 1.0 - 0.908, 1, 1).unwrap();
        assert!(masked_flops(&m).total < vanilla_flops(&m).total);
        assert_eq!(masked_flops(&m).av_flops, vanilla_flops(&m).av_flops);
    }

    #[test]
    fn limit_properties() {
        assert!((flops_ratio_limit(64, 1.0, 1.0) - 1.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 1..=100 {
            let r = flops_ratio_limit(64, k as f64 / 100.0, 1.0);
            assert!(r >= 1.0 - 1e-15 && r < prev);
            prev = r;
        }
        let limit = flops_ratio_limit(64, 0.092, 1.0);
        let at = flops_ratio(4096.0, 64.0, 0.092, 1.0, 1.0);
        assert!((at / limit - 1.0).abs() < 0.01);
    }

    #[test]
    fn counter_matches_model_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..30 {
            let n = rng.random_range(1..40);
            let d = rng.random_range(1..20);
            let zf = rng.random_range(0.0..=(1.0 - 1.0 / n as f64));
            let mask = random_mask(n, zf, seed).unwrap();
            let x = input(n, d, seed);
            let model = FlopsModel::from_mask(&mask, d as u64, 1, 1).unwrap();
            assert_eq!(counted_flops(CountedKernel::Masked, &x, &mask, 1, 1).unwrap(), masked_flops(&model));
            assert_eq!(counted_flops(CountedKernel::Vanilla, &x, &mask, 1, 1).unwrap(), vanilla_flops(&model));
        }
    }

    #[test]
    fn zero_fraction_quantization_matches_random_mask() {
        let m = FlopsModel::with_zero_fraction(32, 64, 0.908, 1, 1).unwrap();
        assert_eq!(m.nonzeros as usize, random_mask(32, 0.908, 5).unwrap().nonzeros());
    }
}
