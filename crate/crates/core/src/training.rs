//! Supervised behavioral cloning on synthetic graph-local tasks.
//!
//! A teacher maps the observations around each node (within a fixed graph
//! radius) to that node's actions through a fixed random nonlinearity. Policies
//! regress the teacher's noisy actions with mean squared error and are trained
//! with exact gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{BodyTransformer, EncoderError, ParameterStore};
use crate::graph::{Allocation, EmbodimentGraph};
use crate::nn::{Linear, Parameters};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("width mismatch: prediction {pred}, target {target}")]
    Width { pred: usize, target: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Mean squared error over components.
pub fn loss_mse(pred: ArrayView1<'_, f64>, target: ArrayView1<'_, f64>) -> Result<f64, TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::Width { pred: pred.len(), target: target.len() });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// A differentiable observation-to-action map.
pub trait Policy: Sync {
    type Params: Parameters + Send + Sync;

    fn init(&self, seed: u64) -> Self::Params;

    /// One action row per observation row.
    fn predict_batch(&self, params: &Self::Params, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>, TrainError>;

    /// Adds `scale * d loss_b / d params` summed over the rows to `grad` and
    /// returns the summed unscaled per-row losses.
    fn accumulate_batch(
        &self,
        params: &Self::Params,
        obs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        scale: f64,
        grad: &mut Self::Params,
    ) -> Result<f64, TrainError>;

    fn predict(&self, params: &Self::Params, obs: ArrayView1<'_, f64>) -> Result<Array1<f64>, TrainError> {
        Ok(self.predict_batch(params, obs.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    fn accumulate_gradient(
        &self,
        params: &Self::Params,
        obs: ArrayView1<'_, f64>,
        target: ArrayView1<'_, f64>,
        scale: f64,
        grad: &mut Self::Params,
    ) -> Result<f64, TrainError> {
        self.accumulate_batch(params, obs.insert_axis(Axis(0)), target.insert_axis(Axis(0)), scale, grad)
    }
}

/// Per-row MSE losses and their gradients with respect to the predictions.
fn mse_rows(pred: &Array2<f64>, targets: ArrayView2<'_, f64>, scale: f64) -> Result<(f64, Array2<f64>), TrainError> {
    if pred.dim() != targets.dim() {
        return Err(TrainError::Width { pred: pred.ncols(), target: targets.ncols() });
    }
    let mut loss = 0.0;
    for (p, t) in pred.rows().into_iter().zip(targets.rows()) {
        loss += loss_mse(p, t)?;
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("forward pass"));
    }
    let w = pred.ncols().max(1) as f64;
    Ok((loss, (pred - &targets) * (2.0 * scale / w)))
}

impl Policy for BodyTransformer {
    type Params = ParameterStore;

    fn init(&self, seed: u64) -> ParameterStore {
        self.init_params(seed)
    }

    fn predict_batch(&self, params: &ParameterStore, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>, TrainError> {
        Ok(self.policy_forward_batch(obs, params)?)
    }

    fn accumulate_batch(
        &self,
        params: &ParameterStore,
        obs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        scale: f64,
        grad: &mut ParameterStore,
    ) -> Result<f64, TrainError> {
        let cache = self.forward_batch_cached(obs, params)?;
        let pred = self.detokenize_actions_batch(cache.features().view(), params)?;
        let (loss, d_actions) = mse_rows(&pred, targets, scale)?;
        let no_value = Array1::zeros(obs.nrows());
        self.backward_batch(params, &cache, d_actions.view(), no_value.view(), grad);
        Ok(loss)
    }
}

/// Objective gradients for the body transformer with an optional critic term.
pub trait ValueObjective {
    /// Loss is `mse(actions, target) + (value - value_target)^2` when a value
    /// target is given.
    fn accumulate_gradient_with_value(
        &self,
        params: &ParameterStore,
        obs: ArrayView1<'_, f64>,
        target: ArrayView1<'_, f64>,
        value_target: Option<f64>,
        scale: f64,
        grad: &mut ParameterStore,
    ) -> Result<f64, TrainError>;

    fn objective(
        &self,
        params: &ParameterStore,
        obs: ArrayView1<'_, f64>,
        target: ArrayView1<'_, f64>,
        value_target: Option<f64>,
    ) -> Result<f64, TrainError>;
}

impl ValueObjective for BodyTransformer {
    fn accumulate_gradient_with_value(
        &self,
        params: &ParameterStore,
        obs: ArrayView1<'_, f64>,
        target: ArrayView1<'_, f64>,
        value_target: Option<f64>,
        scale: f64,
        grad: &mut ParameterStore,
    ) -> Result<f64, TrainError> {
        let cache = self.forward_cached(obs, params)?;
        let pred = self.detokenize_actions(cache.features().view(), params)?;
        let mut loss = loss_mse(pred.view(), target)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite("forward pass"));
        }
        let d_action = (&pred - &target) * (2.0 * scale / pred.len().max(1) as f64);
        let mut d_value = 0.0;
        if let Some(vt) = value_target {
            let value = self.detokenize_value(cache.features().view(), params)?;
            loss += (value - vt) * (value - vt);
            d_value = 2.0 * (value - vt) * scale;
        }
        self.backward(params, &cache, d_action.view(), d_value, grad);
        Ok(loss)
    }

    fn objective(
        &self,
        params: &ParameterStore,
        obs: ArrayView1<'_, f64>,
        target: ArrayView1<'_, f64>,
        value_target: Option<f64>,
    ) -> Result<f64, TrainError> {
        let tokens = self.tokenize(obs, params)?;
        let features = self.encode(tokens.view(), params)?;
        let pred = self.detokenize_actions(features.view(), params)?;
        let mut loss = loss_mse(pred.view(), target)?;
        if let Some(vt) = value_target {
            let value = self.detokenize_value(features.view(), params)?;
            loss += (value - vt) * (value - vt);
        }
        Ok(loss)
    }
}

/// Hidden layer widths of the MLP baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpBaselineConfig {
    /// Width of each per-node token.
    pub d_model: usize,
    pub hidden: Vec<usize>,
}

impl MlpBaselineConfig {
    pub fn param_count(&self, graph: &EmbodimentGraph) -> usize {
        let d = self.d_model;
        let tokenizers: usize = graph.nodes().iter().map(|s| d * s.obs_dim + d).sum();
        let mut width = graph.len() * d;
        let mut total = tokenizers;
        for &h in &self.hidden {
            total += h * width + h;
            width = h;
        }
        total + graph.total_action_dim() * (width + 1)
    }

    /// `depth` equal hidden layers sized so the parameter count is as close
    /// as possible to `target`.
    pub fn matched(graph: &EmbodimentGraph, d_model: usize, depth: usize, target: usize) -> Self {
        let count = |w: usize| Self { d_model, hidden: vec![w; depth] }.param_count(graph);
        let best = (1..=4096)
            .min_by_key(|&w| (count(w) as i64 - target as i64).unsigned_abs())
            .unwrap_or(1);
        Self { d_model, hidden: vec![best; depth] }
    }
}

/// Per-node tokenizers followed by an MLP over the stacked tokens.
#[derive(Debug, Clone)]
pub struct MlpPolicy {
    graph: EmbodimentGraph,
    alloc: Allocation,
    cfg: MlpBaselineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub tokenizers: Vec<Linear>,
    /// Hidden layers then the output layer.
    pub layers: Vec<Linear>,
}

impl Parameters for MlpParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, t) in self.tokenizers.iter().enumerate() {
            t.visit(&format!("tokenizer.{i}"), f);
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("mlp.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, t) in self.tokenizers.iter_mut().enumerate() {
            t.visit_mut(&format!("tokenizer.{i}"), f);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("mlp.{i}"), f);
        }
    }
}

impl MlpPolicy {
    pub fn new(graph: EmbodimentGraph, alloc: Allocation, cfg: MlpBaselineConfig) -> Result<Self, TrainError> {
        if cfg.d_model == 0 || cfg.hidden.contains(&0) {
            return Err(TrainError::Config("MLP widths must be positive".into()));
        }
        Ok(Self { graph, alloc, cfg })
    }

    pub fn config(&self) -> &MlpBaselineConfig {
        &self.cfg
    }

    fn stacked_tokens(&self, params: &MlpParams, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>, TrainError> {
        if obs.ncols() != self.alloc.obs_width() {
            return Err(TrainError::Width { pred: obs.ncols(), target: self.alloc.obs_width() });
        }
        let d = self.cfg.d_model;
        let mut stacked = Array2::zeros((obs.nrows(), self.graph.len() * d));
        for (i, t) in params.tokenizers.iter().enumerate() {
            let x = obs.slice(s![.., self.alloc.obs_ranges[i].clone()]);
            stacked.slice_mut(s![.., i * d..(i + 1) * d]).assign(&t.forward(x));
        }
        Ok(stacked)
    }

    /// Returns the activations entering each layer plus the final output.
    fn forward_all(&self, params: &MlpParams, obs: ArrayView2<'_, f64>) -> Result<(Vec<Array2<f64>>, Array2<f64>), TrainError> {
        let mut inputs = Vec::with_capacity(params.layers.len());
        let mut x = self.stacked_tokens(params, obs)?;
        let last = params.layers.len() - 1;
        for (l, layer) in params.layers.iter().enumerate() {
            let mut y = layer.forward(x.view());
            if l < last {
                y.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(x);
            x = y;
        }
        Ok((inputs, x))
    }
}

impl Policy for MlpPolicy {
    type Params = MlpParams;

    fn init(&self, seed: u64) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.cfg.d_model;
        let tokenizers = self.graph.nodes().iter().map(|s| Linear::init(d, s.obs_dim, &mut rng)).collect();
        let mut width = self.graph.len() * d;
        let mut layers = Vec::with_capacity(self.cfg.hidden.len() + 1);
        for &h in &self.cfg.hidden {
            layers.push(Linear::init(h, width, &mut rng));
            width = h;
        }
        layers.push(Linear::init(self.alloc.action_width(), width, &mut rng));
        MlpParams { tokenizers, layers }
    }

    fn predict_batch(&self, params: &MlpParams, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>, TrainError> {
        Ok(self.forward_all(params, obs)?.1)
    }

    fn accumulate_batch(
        &self,
        params: &MlpParams,
        obs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        scale: f64,
        grad: &mut MlpParams,
    ) -> Result<f64, TrainError> {
        let (inputs, pred) = self.forward_all(params, obs)?;
        let (loss, mut g) = mse_rows(&pred, targets, scale)?;
        for l in (0..params.layers.len()).rev() {
            let x = &inputs[l];
            let mut gx = params.layers[l].backward(x.view(), g.view(), &mut grad.layers[l]);
            if l > 0 {
                // x = relu(pre) and x > 0 exactly where pre > 0.
                gx.zip_mut_with(x, |v, &a| {
                    if a <= 0.0 {
                        *v = 0.0
                    }
                });
            }
            g = gx;
        }
        let d = self.cfg.d_model;
        for (i, t) in params.tokenizers.iter().enumerate() {
            let x = obs.slice(s![.., self.alloc.obs_ranges[i].clone()]);
            t.accumulate(x, g.slice(s![.., i * d..(i + 1) * d]), &mut grad.tokenizers[i]);
        }
        Ok(loss)
    }
}

/// Fixed random map from a node's radius-`r` neighbourhood to its actions:
/// `a = tanh(W x_N + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTeacher {
    pub node: usize,
    /// Indices into the flat observation vector.
    pub inputs: Vec<usize>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub radius: usize,
    pub nodes: Vec<NodeTeacher>,
}

impl Teacher {
    pub fn new(graph: &EmbodimentGraph, alloc: &Allocation, radius: usize, rng: &mut ChaCha8Rng) -> Self {
        let nodes = graph
            .nodes()
            .iter()
            .filter(|s| s.action_dim > 0)
            .map(|s| {
                let inputs: Vec<usize> = graph
                    .ball(s.id, radius)
                    .into_iter()
                    .flat_map(|j| alloc.obs_ranges[j].clone())
                    .collect();
                let std = 1.0 / (inputs.len().max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let weight = Array2::from_shape_fn((s.action_dim, inputs.len()), |_| normal.sample(rng));
                let bias = Array1::from_shape_fn(s.action_dim, |_| rng.random_range(-0.1..0.1));
                NodeTeacher { node: s.id, inputs, weight, bias }
            })
            .collect();
        Self { radius, nodes }
    }

    pub fn act(&self, alloc: &Allocation, obs: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(alloc.action_width());
        for t in &self.nodes {
            let x: Array1<f64> = t.inputs.iter().map(|&k| obs[k]).collect();
            let a = (t.weight.dot(&x) + &t.bias).mapv(f64::tanh);
            out.slice_mut(s![alloc.action_ranges[t.node].clone()]).assign(&a);
        }
        out
    }
}

/// Observation and target rows, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset { obs: self.obs.select(Axis(0), rows), actions: self.actions.select(Axis(0), rows) }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub graph: EmbodimentGraph,
    pub alloc: Allocation,
    pub radius: usize,
    pub noise: f64,
    pub teacher: Teacher,
    pub train: Dataset,
    pub validation: Dataset,
}

/// Observations are i.i.d. standard normal; targets are the teacher's
/// actions plus Gaussian noise of standard deviation `noise`.
pub fn generate_task(
    graph: &EmbodimentGraph,
    radius: usize,
    noise: f64,
    train_samples: usize,
    validation_samples: usize,
    seed: u64,
) -> Result<SyntheticTask, TrainError> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(TrainError::Config(format!("noise level {noise} must be a nonnegative number")));
    }
    let alloc = Allocation::from_graph(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Teacher::new(graph, &alloc, radius, &mut rng);
    let draw = |count: usize, rng: &mut ChaCha8Rng| -> Dataset {
        let mut obs = Array2::zeros((count, alloc.obs_width()));
        let mut actions = Array2::zeros((count, alloc.action_width()));
        for (mut o, mut a) in obs.rows_mut().into_iter().zip(actions.rows_mut()) {
            o.mapv_inplace(|_| StandardNormal.sample(rng));
            a.assign(&teacher.act(&alloc, o.view()));
            if noise > 0.0 {
                a.mapv_inplace(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + noise * z
                });
            }
        }
        Dataset { obs, actions }
    };
    let train = draw(train_samples, &mut rng);
    let validation = draw(validation_samples, &mut rng);
    Ok(SyntheticTask { graph: graph.clone(), alloc, radius, noise, teacher, train, validation })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over all steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Split each batch into fixed chunks reduced in order on a thread pool.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::default(),
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            schedule: Schedule::Constant,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be a nonnegative number".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, size: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; size], vec![0.0; size]),
        };
        Self { kind, step: 0, m, v }
    }

    fn apply<P: Parameters>(&mut self, params: &mut P, grad: &P, lr: f64) {
        let g = grad.flatten();
        self.step += 1;
        let mut offset = 0;
        match self.kind {
            OptimizerKind::Sgd => params.visit_mut(&mut |_, t| {
                for (p, gi) in t.iter_mut().zip(&g[offset..]) {
                    *p -= lr * gi;
                }
                offset += t.len();
            }),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let (m, v) = (&mut self.m, &mut self.v);
                params.visit_mut(&mut |_, t| {
                    for (k, p) in t.iter_mut().enumerate() {
                        let idx = offset + k;
                        m[idx] = beta1 * m[idx] + (1.0 - beta1) * g[idx];
                        v[idx] = beta2 * v[idx] + (1.0 - beta2) * g[idx] * g[idx];
                        let m_hat = m[idx] / bc1;
                        let v_hat = v[idx] / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    offset += t.len();
                });
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<P> {
    pub params: P,
    pub curve: Vec<EpochLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train_mse: f64,
    pub val_mse: f64,
}

const CHUNK: usize = 16;
const EVAL_CHUNK: usize = 256;

/// Mean-loss gradient over a batch in one pass, or over fixed row chunks in
/// parallel that are then summed in chunk order.
pub fn batch_gradient<M: Policy>(
    model: &M,
    params: &M::Params,
    batch: &Dataset,
    parallel: bool,
) -> Result<(f64, M::Params), TrainError> {
    let scale = 1.0 / batch.len() as f64;
    if !parallel {
        let mut grad = params.zeros_like();
        let loss = model.accumulate_batch(params, batch.obs.view(), batch.actions.view(), scale, &mut grad)?;
        return Ok((loss * scale, grad));
    }
    let starts: Vec<usize> = (0..batch.len()).step_by(CHUNK).collect();
    let partials: Vec<(f64, Vec<f64>)> = starts
        .par_iter()
        .map(|&start| {
            let rows = start..(start + CHUNK).min(batch.len());
            let mut grad = params.zeros_like();
            let loss = model.accumulate_batch(
                params,
                batch.obs.slice(s![rows.clone(), ..]),
                batch.actions.slice(s![rows, ..]),
                scale,
                &mut grad,
            )?;
            Ok((loss, grad.flatten()))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut total = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    let mut grad = params.zeros_like();
    grad.assign_flat(&total);
    Ok((loss * scale, grad))
}

/// Mean per-sample MSE. Fixed row chunks are evaluated in parallel and summed
/// in order, so the result does not depend on the thread count.
pub fn mean_loss<M: Policy>(model: &M, params: &M::Params, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let sums: Vec<f64> = starts
        .par_iter()
        .map(|&start| {
            let rows = start..(start + EVAL_CHUNK).min(data.len());
            let pred = model.predict_batch(params, data.obs.slice(s![rows.clone(), ..]))?;
            let mut sum = 0.0;
            for (p, t) in pred.rows().into_iter().zip(data.actions.slice(s![rows, ..]).rows()) {
                sum += loss_mse(p, t)?;
            }
            Ok(sum)
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(sums.iter().sum::<f64>() / data.len() as f64)
}

pub fn evaluate<M: Policy>(model: &M, task: &SyntheticTask, params: &M::Params) -> Result<Evaluation, TrainError> {
    Ok(Evaluation {
        train_mse: mean_loss(model, params, &task.train)?,
        val_mse: mean_loss(model, params, &task.validation)?,
    })
}

/// Minibatch training with a seeded shuffle per epoch. Each curve entry is the
/// full-split MSE measured after that epoch.
pub fn train<M: Policy>(model: &M, task: &SyntheticTask, cfg: &TrainConfig) -> Result<TrainReport<M::Params>, TrainError> {
    let params = model.init(cfg.seed);
    train_from(model, task, cfg, params)
}

pub fn train_from<M: Policy>(
    model: &M,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    mut params: M::Params,
) -> Result<TrainReport<M::Params>, TrainError> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(TrainError::Config("task has no training samples".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0ba7c4);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let steps_per_epoch = task.train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = task.train.select(chunk);
            let (loss, grad) = batch_gradient(model, &params, &batch, cfg.parallel)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.learning_rate,
                Schedule::Cosine => {
                    let progress = step as f64 / total_steps;
                    0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            };
            optimizer.apply(&mut params, &grad, lr);
            step += 1;
        }
        let eval = evaluate(model, task, &params)?;
        if !eval.train_mse.is_finite() || !params.all_finite() {
            return Err(TrainError::Diverged { epoch, loss: eval.train_mse });
        }
        curve.push(EpochLoss { epoch, train_mse: eval.train_mse, val_mse: eval.val_mse });
    }
    Ok(TrainReport { params, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Variant};
    use ndarray::arr1;

    #[test]
    fn mse_cases() {
        let t = arr1(&[0.5, -1.0, 2.0]);
        assert_eq!(loss_mse(t.view(), t.view()).unwrap(), 0.0);
        let p = &t + 1.0;
        assert_eq!(loss_mse(p.view(), t.view()).unwrap(), 1.0);
        let a = arr1(&[0.3, -0.2, 1.1, 0.0, 2.5, -1.4, 0.7]);
        let b = arr1(&[0.1, 0.2, 1.0, -0.5, 2.0, -1.0, 1.0]);
        // 0.04 + 0.16 + 0.01 + 0.25 + 0.25 + 0.16 + 0.09 = 0.96
        assert!((loss_mse(a.view(), b.view()).unwrap() - 0.96 / 7.0).abs() < 1e-15);
        assert!(matches!(loss_mse(a.view(), t.view()), Err(TrainError::Width { .. })));
    }

    #[test]
    fn task_is_deterministic_and_local() {
        let g = EmbodimentGraph::chain(5, 2, 1).unwrap();
        let a = generate_task(&g, 1, 0.0, 20, 5, 3).unwrap();
        let b = generate_task(&g, 1, 0.0, 20, 5, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);

        let obs = a.train.obs.row(0).to_owned();
        let base = a.teacher.act(&a.alloc, obs.view());
        let mut bumped = obs.clone();
        bumped[8] += 3.0;
        bumped[9] -= 3.0;
        let moved = a.teacher.act(&a.alloc, bumped.view());
        assert_eq!(base[0], moved[0]);
        assert_eq!(base[2], moved[2]);
        assert_ne!(base[3], moved[3]);
        assert_ne!(base[4], moved[4]);

        let r0 = generate_task(&g, 0, 0.0, 1, 0, 1).unwrap();
        for t in &r0.teacher.nodes {
            assert_eq!(t.inputs, r0.alloc.obs_ranges[t.node].clone().collect::<Vec<_>>());
        }
    }

    #[test]
    fn teacher_scores_the_noise_floor() {
        let g = EmbodimentGraph::chain(8, 2, 1).unwrap();
        let task = generate_task(&g, 1, 0.1, 0, 4000, 2).unwrap();
        let val = &task.validation;
        let mut total = 0.0;
        for (obs, target) in val.obs.rows().into_iter().zip(val.actions.rows()) {
            total += loss_mse(task.teacher.act(&task.alloc, obs).view(), target).unwrap();
        }
        let mse = total / val.len() as f64;
        // 32000 squared N(0, 0.01) draws: relative standard error about 0.8%.
        assert!((mse / 0.01 - 1.0).abs() < 0.04, "{mse}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let g = EmbodimentGraph::chain(3, 2, 1).unwrap();
        let task = generate_task(&g, 1, 0.01, 32, 8, 0).unwrap();
        let model = BodyTransformer::with_default_allocation(g, EncoderConfig::new(Variant::Hard, 1, 2, 8, 16)).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 8, epochs: 3, seed: 1, ..Default::default() };
        let report = train(&model, &task, &cfg).unwrap();
        assert_eq!(report.params, model.init_params(1));
        assert!(report.curve.windows(2).all(|w| w[0].train_mse == w[1].train_mse));
    }

    #[test]
    fn training_is_reproducible_and_evaluates_consistently() {
        let g = EmbodimentGraph::chain(3, 2, 1).unwrap();
        let task = generate_task(&g, 1, 0.01, 32, 8, 0).unwrap();
        let model = BodyTransformer::with_default_allocation(g, EncoderConfig::new(Variant::Mix, 2, 2, 8, 16)).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 8, epochs: 4, seed: 2, ..Default::default() };
        let a = train(&model, &task, &cfg).unwrap();
        let b = train(&model, &task, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.last().unwrap().train_mse < a.curve[0].train_mse);
        let eval = evaluate(&model, &task, &a.params).unwrap();
        assert_eq!(eval.train_mse, a.curve.last().unwrap().train_mse);
    }

    #[test]
    fn parallel_batches_agree_with_sequential() {
        let g = EmbodimentGraph::chain(4, 2, 1).unwrap();
        let task = generate_task(&g, 1, 0.01, 40, 0, 0).unwrap();
        let model = BodyTransformer::with_default_allocation(g, EncoderConfig::new(Variant::Hard, 2, 2, 8, 16)).unwrap();
        let params = model.init_params(0);
        let batch = task.train.clone();
        let (la, ga) = batch_gradient(&model, &params, &batch, false).unwrap();
        let (lb, gb) = batch_gradient(&model, &params, &batch, true).unwrap();
        assert!((la - lb).abs() <= 1e-10);
        for (x, y) in ga.flatten().iter().zip(gb.flatten()) {
            assert!((x - y).abs() <= 1e-10);
        }
        let (_, gc) = batch_gradient(&model, &params, &batch, true).unwrap();
        assert_eq!(gb, gc);
    }

    #[test]
    fn perfect_predictions_give_zero_gradient() {
        let g = EmbodimentGraph::chain(3, 2, 1).unwrap();
        let model = BodyTransformer::with_default_allocation(g, EncoderConfig::new(Variant::Soft, 2, 2, 8, 16)).unwrap();
        let params = model.init_params(4);
        let obs = Array1::from_shape_fn(6, |i| (i as f64).sin());
        let target = model.policy_forward(obs.view(), &params).unwrap();
        let mut grad = params.zeros_like();
        let loss = model.accumulate_gradient(&params, obs.view(), target.view(), 1.0, &mut grad).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matched_mlp_is_within_ten_percent() {
        let g = EmbodimentGraph::chain(8, 2, 1).unwrap();
        let model = BodyTransformer::with_default_allocation(g.clone(), EncoderConfig::new(Variant::Hard, 3, 2, 16, 32)).unwrap();
        let target = model.expected_param_count();
        let cfg = MlpBaselineConfig::matched(&g, 16, 2, target);
        let count = cfg.param_count(&g);
        assert!((count as f64 - target as f64).abs() <= 0.1 * target as f64);
        let mlp = MlpPolicy::new(g.clone(), Allocation::from_graph(&g), cfg).unwrap();
        assert_eq!(mlp.init(0).num_params(), count);
    }

    #[test]
    fn config_errors() {
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { learning_rate: f64::NAN, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let g = EmbodimentGraph::chain(3, 2, 1).unwrap();
        let mut task = generate_task(&g, 1, 0.0, 8, 2, 0).unwrap();
        task.train.actions[[3, 1]] = f64::INFINITY;
        let mlp = MlpPolicy::new(g.clone(), task.alloc.clone(), MlpBaselineConfig { d_model: 4, hidden: vec![8] }).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 8, epochs: 2, ..Default::default() };
        assert!(matches!(train(&mlp, &task, &cfg), Err(TrainError::NonFinite(_)) | Err(TrainError::Diverged { .. })));
    }
}
