//! Runtime benchmarks of the dense and sparse masked kernels over node
//! counts and mask sparsities, with FLOP counts attached to every row.
//!
//! Timing is single-threaded. Each trial draws fresh standard-normal Q, K, V
//! and a random mask; both kernels see the same inputs.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    dense_masked_attention_with, sparse_masked_attention_with, AttentionError, AttentionInput, NoTally,
    RowCompressedMask,
};
use crate::flops::{counted_flops, flops_ratio_limit, masked_flops, vanilla_flops, CountedKernel, FlopsBreakdown, FlopsError, FlopsModel};
use crate::graph::{random_mask, AttentionMask, GraphError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchKernel {
    Dense,
    Sparse,
}

impl BenchKernel {
    fn counted(self) -> CountedKernel {
        match self {
            BenchKernel::Dense => CountedKernel::Vanilla,
            BenchKernel::Sparse => CountedKernel::Masked,
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kernel: BenchKernel,
    pub n: usize,
    pub d_k: usize,
    /// Requested sparsity ζ of the cell.
    pub zero_fraction: f64,
    pub trial: u64,
    pub runtime_ns: u64,
    /// Row compression of the mask; zero for the dense kernel.
    pub preprocess_ns: u64,
    pub counted_flops: u64,
    pub modeled_flops: u64,
}

pub const BENCH_HEADER: [&str; 9] = [
    "kernel",
    "n",
    "d_k",
    "zero_fraction",
    "trial",
    "runtime_ns",
    "preprocess_ns",
    "counted_flops",
    "modeled_flops",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub nodes: Vec<usize>,
    pub zero_fractions: Vec<f64>,
    pub trials: u64,
    /// Untimed calls of each kernel before a cell's trials.
    pub warmup: u64,
    pub seed: u64,
    pub d_k: usize,
    pub c1: u64,
    pub c2: u64,
}

impl BenchPlan {
    pub fn new(nodes: Vec<usize>, zero_fractions: Vec<f64>, trials: u64, seed: u64) -> Self {
        Self { nodes, zero_fractions, trials, warmup: 10, seed, d_k: 64, c1: 1, c2: 1 }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.trials == 0 {
            return Err(BenchError::Plan("trials must be at least 1".into()));
        }
        if self.d_k == 0 || self.nodes.contains(&0) {
            return Err(BenchError::Plan("n and d_k must be positive".into()));
        }
        for &n in &self.nodes {
            for &zf in &self.zero_fractions {
                let max = 1.0 - 1.0 / n as f64;
                if !(0.0..=max + 1e-12).contains(&zf) {
                    return Err(BenchError::Plan(format!("zero fraction {zf} outside [0, {max}] for n={n}")));
                }
            }
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

/// Inputs for one trial: the mask from `random_mask(n, ζ, seed ^ trial)` and
/// Q, K, V from a stream keyed by the cell.
pub fn trial_inputs(n: usize, d_k: usize, zero_fraction: f64, seed: u64, trial: u64) -> Result<(AttentionInput, AttentionMask), BenchError> {
    let mask = random_mask(n, zero_fraction, seed ^ trial)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ trial);
    rng.set_stream(((n as u64) << 32) ^ zero_fraction.to_bits().rotate_left(16) ^ d_k as u64);
    let q = standard_normal(&mut rng, n, d_k);
    let k = standard_normal(&mut rng, n, d_k);
    let v = standard_normal(&mut rng, n, d_k);
    Ok((AttentionInput::new(q, k, v)?, mask))
}

fn time_dense(input: &AttentionInput, mask: &AttentionMask) -> Result<u64, BenchError> {
    let start = Instant::now();
    let out = dense_masked_attention_with(black_box(input), black_box(mask), &mut NoTally)?;
    let ns = start.elapsed().as_nanos() as u64;
    black_box(out);
    Ok(ns.max(1))
}

fn time_sparse(input: &AttentionInput, rc: &RowCompressedMask) -> Result<u64, BenchError> {
    let start = Instant::now();
    let out = sparse_masked_attention_with(black_box(input), black_box(rc), &mut NoTally)?;
    let ns = start.elapsed().as_nanos() as u64;
    black_box(out);
    Ok(ns.max(1))
}

fn warm_up(plan: &BenchPlan, n: usize, zf: f64) -> Result<(), BenchError> {
    let (input, mask) = trial_inputs(n, plan.d_k, zf, plan.seed, u64::MAX)?;
    let rc = RowCompressedMask::new(&mask);
    for _ in 0..plan.warmup {
        time_dense(&input, &mask)?;
        time_sparse(&input, &rc)?;
    }
    Ok(())
}

fn run_trial(plan: &BenchPlan, n: usize, zf: f64, trial: u64, out: &mut Vec<BenchRecord>) -> Result<(), BenchError> {
    let d = plan.d_k;
    let (input, mask) = trial_inputs(n, d, zf, plan.seed, trial)?;
    let start = Instant::now();
    let rc = black_box(RowCompressedMask::new(black_box(&mask)));
    let preprocess = (start.elapsed().as_nanos() as u64).max(1);
    let (dense_ns, sparse_ns) = if trial.is_multiple_of(2) {
        let a = time_dense(&input, &mask)?;
        (a, time_sparse(&input, &rc)?)
    } else {
        let b = time_sparse(&input, &rc)?;
        (time_dense(&input, &mask)?, b)
    };
    let model = FlopsModel::from_mask(&mask, d as u64, plan.c1, plan.c2)?;
    for (kernel, runtime_ns, preprocess_ns, modeled) in [
        (BenchKernel::Dense, dense_ns, 0, vanilla_flops(&model)),
        (BenchKernel::Sparse, sparse_ns, preprocess, masked_flops(&model)),
    ] {
        let counted = counted_flops(kernel.counted(), &input, &mask, plan.c1, plan.c2)?;
        out.push(BenchRecord {
            kernel,
            n,
            d_k: d,
            zero_fraction: zf,
            trial,
            runtime_ns,
            preprocess_ns,
            counted_flops: counted.total,
            modeled_flops: modeled.total,
        });
    }
    Ok(())
}

/// Every (n, ζ) cell of the plan. Trials run round-robin over the cells so
/// slow drift of the host affects all cells alike; rows come back in plan
/// order, dense row before sparse row within a trial.
pub fn run_scaling_bench(plan: &BenchPlan) -> Result<Vec<BenchRecord>, BenchError> {
    plan.validate()?;
    let cells: Vec<(usize, f64)> =
        plan.nodes.iter().flat_map(|&n| plan.zero_fractions.iter().map(move |&zf| (n, zf))).collect();
    for &(n, zf) in &cells {
        warm_up(plan, n, zf)?;
    }
    let mut per_cell = vec![Vec::with_capacity(2 * plan.trials as usize); cells.len()];
    for trial in 0..plan.trials {
        for (&(n, zf), out) in cells.iter().zip(per_cell.iter_mut()) {
            run_trial(plan, n, zf, trial, out)?;
        }
    }
    Ok(per_cell.concat())
}

/// `ζ_min, ζ_min + step, ...` up to `ζ_max`, computed by index to avoid drift.
pub fn zero_fraction_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>, BenchError> {
    if !(step > 0.0) || !(min <= max) || min < 0.0 {
        return Err(BenchError::Plan(format!("bad sparsity grid {min}..{max} step {step}")));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| min + i as f64 * step).collect())
}

/// Runs every ζ of the grid that is valid for each n (ζ ≤ 1 - 1/n).
pub fn run_sparsity_sweep(
    nodes: &[usize],
    grid: &[f64],
    trials: u64,
    seed: u64,
    d_k: usize,
) -> Result<Vec<BenchRecord>, BenchError> {
    let mut out = Vec::new();
    for &n in nodes {
        let max = 1.0 - 1.0 / n as f64;
        let zfs: Vec<f64> = grid.iter().copied().filter(|&z| z <= max + 1e-12).collect();
        let plan = BenchPlan { d_k, ..BenchPlan::new(vec![n], zfs, trials, seed) };
        out.extend(run_scaling_bench(&plan)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub kernel: BenchKernel,
    pub n: usize,
    pub zero_fraction: f64,
    pub trials: usize,
    pub mean_ns: f64,
    /// Standard error of the mean runtime.
    pub stderr_ns: f64,
    pub mean_preprocess_ns: f64,
    pub counted_flops_mean: f64,
}

/// Groups records by (kernel, n, ζ) in first-appearance order.
pub fn summarize(records: &[BenchRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(BenchKernel, usize, u64)> = Vec::new();
    for r in records {
        let key = (r.kernel, r.n, r.zero_fraction.to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(kernel, n, zf)| {
            let cell: Vec<&BenchRecord> = records
                .iter()
                .filter(|r| r.kernel == kernel && r.n == n && r.zero_fraction.to_bits() == zf)
                .collect();
            let k = cell.len() as f64;
            let mean = cell.iter().map(|r| r.runtime_ns as f64).sum::<f64>() / k;
            let var = if cell.len() > 1 {
                cell.iter().map(|r| (r.runtime_ns as f64 - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            CellSummary {
                kernel,
                n,
                zero_fraction: f64::from_bits(zf),
                trials: cell.len(),
                mean_ns: mean,
                stderr_ns: (var / k).sqrt(),
                mean_preprocess_ns: cell.iter().map(|r| r.preprocess_ns as f64).sum::<f64>() / k,
                counted_flops_mean: cell.iter().map(|r| r.counted_flops as f64).sum::<f64>() / k,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub n: usize,
    pub zero_fraction: f64,
    pub dense_mean_ns: f64,
    pub sparse_mean_ns: f64,
    /// Dense mean over sparse mean.
    pub ratio: f64,
}

pub fn speedups(summary: &[CellSummary]) -> Vec<Speedup> {
    summary
        .iter()
        .filter(|c| c.kernel == BenchKernel::Dense)
        .filter_map(|dense| {
            let sparse = summary.iter().find(|c| {
                c.kernel == BenchKernel::Sparse && c.n == dense.n && c.zero_fraction == dense.zero_fraction
            })?;
            Some(Speedup {
                n: dense.n,
                zero_fraction: dense.zero_fraction,
                dense_mean_ns: dense.mean_ns,
                sparse_mean_ns: sparse.mean_ns,
                ratio: dense.mean_ns / sparse.mean_ns,
            })
        })
        .collect()
}

/// Smallest ζ per n at which the sparse mean runtime is below the dense one.
pub fn crossovers(speedups: &[Speedup]) -> Vec<(usize, Option<f64>)> {
    let mut nodes: Vec<usize> = speedups.iter().map(|s| s.n).collect();
    nodes.dedup();
    nodes
        .into_iter()
        .map(|n| {
            let mut cells: Vec<&Speedup> = speedups.iter().filter(|s| s.n == n).collect();
            cells.sort_by(|a, b| a.zero_fraction.total_cmp(&b.zero_fraction));
            (n, cells.iter().find(|s| s.sparse_mean_ns < s.dense_mean_ns).map(|s| s.zero_fraction))
        })
        .collect()
}

pub fn speedup_table(speedups: &[Speedup]) -> String {
    let mut out = format!("{:>6} {:>8} {:>14} {:>14} {:>8}\n", "n", "zeta", "dense_ns", "sparse_ns", "ratio");
    for s in speedups {
        out.push_str(&format!(
            "{:>6} {:>8.4} {:>14.1} {:>14.1} {:>8.3}\n",
            s.n, s.zero_fraction, s.dense_mean_ns, s.sparse_mean_ns, s.ratio
        ));
    }
    out
}

/// Analytical FLOPs of both kernels at one size and sparsity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub model: FlopsModel,
    pub vanilla: FlopsBreakdown,
    pub masked: FlopsBreakdown,
    /// Vanilla total over masked total.
    pub ratio: f64,
    pub limit: f64,
}

pub fn report_flops(n: u64, d_k: u64, zero_fraction: f64, c1: u64, c2: u64) -> Result<FlopsReport, BenchError> {
    let model = FlopsModel::with_zero_fraction(n, d_k, zero_fraction, c1, c2)?;
    let vanilla = vanilla_flops(&model);
    let masked = masked_flops(&model);
    Ok(FlopsReport {
        model,
        vanilla,
        masked,
        ratio: vanilla.total as f64 / masked.total as f64,
        limit: flops_ratio_limit(d_k, model.density(), c2 as f64),
    })
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        writeln!(f, "n = {}, d_k = {}, c1 = {}, c2 = {}", m.n, m.d_k, m.c1, m.c2)?;
        writeln!(
            f,
            "sparsity zeta (zero fraction) = {:.6}, density eta (nonzero fraction) = {:.6}, nonzeros = {}",
            m.zero_fraction(),
            m.density(),
            m.nonzeros
        )?;
        writeln!(f, "{:<10} {:>16} {:>16} {:>16} {:>16}", "kernel", "qk", "softmax", "av", "total")?;
        for (name, b) in [("vanilla", &self.vanilla), ("masked", &self.masked)] {
            writeln!(f, "{:<10} {:>16} {:>16} {:>16} {:>16}", name, b.qk_flops, b.softmax_flops, b.av_flops, b.total)?;
        }
        writeln!(f, "ratio vanilla/masked at n = {}: {:.6}", m.n, self.ratio)?;
        write!(f, "limit as n -> infinity: {:.6}", self.limit)
    }
}
