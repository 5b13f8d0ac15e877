#![allow(dead_code)]

use std::collections::BTreeMap;

use body_transformer::encoder::{BodyTransformer, EncoderConfig, Variant};
use body_transformer::graph::{EmbodimentGraph, NodeSpec};
use body_transformer::nn::Parameters;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-1.0..1.0))
}

pub fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn nodes(rng: &mut ChaCha8Rng, n: usize) -> Vec<NodeSpec> {
    let root = rng.random_range(0..n);
    (0..n)
        .map(|id| NodeSpec {
            id,
            name: format!("n{id}"),
            obs_dim: rng.random_range(1..=3),
            action_dim: rng.random_range(1..=2),
            is_root: id == root,
        })
        .collect()
}

/// Random labelled tree: each node attaches to an earlier one.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> EmbodimentGraph {
    let edges = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    EmbodimentGraph::new(nodes(rng, n), edges).unwrap()
}

/// Random tree plus extra edges, so cycles appear.
pub fn random_connected(rng: &mut ChaCha8Rng, n: usize) -> EmbodimentGraph {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let (a, b) = (a.min(b), a.max(b));
        if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == (a, b)) {
            edges.push((a, b));
        }
    }
    EmbodimentGraph::new(nodes(rng, n), edges).unwrap()
}

/// Nodes whose observations change node `node`'s actions, found by bumping
/// one node's observation slice at a time and comparing full forward passes.
pub fn perturbation_dependencies(
    model: &BodyTransformer,
    params: &body_transformer::encoder::ParameterStore,
    obs: &Array1<f64>,
    node: usize,
) -> Vec<usize> {
    let alloc = model.allocation();
    let base = model.policy_forward(obs.view(), params).unwrap();
    let out = alloc.action_ranges[node].clone();
    (0..model.n())
        .filter(|&j| {
            let mut bumped = obs.clone();
            for k in alloc.obs_ranges[j].clone() {
                bumped[k] += 0.75;
            }
            let moved = model.policy_forward(bumped.view(), params).unwrap();
            out.clone().any(|k| moved[k] != base[k])
        })
        .collect()
}

/// Gradient-check result for one parameter group.
#[derive(Debug, Clone, Copy)]
pub struct GroupError {
    /// `|g - g_fd| / max(|g|, |g_fd|, 1e-7)`; the floor keeps groups whose
    /// exact gradient is zero (key biases under softmax shift invariance)
    /// from dividing rounding noise by itself.
    pub relative: f64,
    /// Coordinates left out because a ReLU kink lies within the step.
    pub kinks: usize,
    pub len: usize,
}

/// Checks an analytic gradient against central differences with step
/// `1e-4 * max(|θ|, 1)`. A coordinate whose forward and backward one-sided
/// differences disagree by more than 1% is not differentiable inside the
/// step and is skipped.
pub fn gradient_errors<P: Parameters>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> BTreeMap<String, GroupError> {
    let mut names = Vec::new();
    params.visit(&mut |name, t| names.push((name.to_string(), t.len())));
    let flat = params.flatten();
    let grad = analytic.flatten();
    let center = loss(params);
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for (name, len) in names {
        let (mut diff, mut norm_a, mut norm_fd, mut kinks) = (0.0, 0.0, 0.0, 0);
        for i in offset..offset + len {
            let h = 1e-4 * flat[i].abs().max(1.0);
            let mut shifted = flat.clone();
            shifted[i] = flat[i] + h;
            probe.assign_flat(&shifted);
            let up = loss(&probe);
            shifted[i] = flat[i] - h;
            probe.assign_flat(&shifted);
            let down = loss(&probe);
            let (forward, backward) = ((up - center) / h, (center - down) / h);
            if (forward - backward).abs() > 1e-2 * forward.abs().max(backward.abs()).max(1e-3) {
                kinks += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            diff += (grad[i] - fd).powi(2);
            norm_a += grad[i].powi(2);
            norm_fd += fd.powi(2);
        }
        let scale = norm_a.sqrt().max(norm_fd.sqrt());
        out.insert(name, GroupError { relative: diff.sqrt() / scale.max(1e-7), kinks, len });
        offset += len;
    }
    out
}

pub fn chain(n: usize) -> EmbodimentGraph {
    EmbodimentGraph::chain(n, 2, 1).unwrap()
}

pub fn tiny_config(variant: Variant) -> EncoderConfig {
    let mut cfg = EncoderConfig::new(variant, 2, 2, 8, 16);
    cfg.use_positional_encoding = true;
    cfg
}
