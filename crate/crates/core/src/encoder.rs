//! The body transformer pipeline: per-node tokenizers, a stack of post-norm
//! encoder layers whose attention follows the variant's mask schedule, and
//! per-node detokenizers for actions and critic values.
//!
//! Forward passes can record a [`ForwardCache`], from which
//! [`BodyTransformer::backward`] computes exact gradients.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, CowArray, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    apply_weights, dense_weights, sparse_weights, AttentionError, Kernel, Logits, MultiHeadWeights,
    NoTally, RowCompressedMask,
};
use crate::graph::{random_mask, Allocation, AttentionMask, EmbodimentGraph, GraphError};
use crate::nn::{LayerNorm, LayerNormCache, Linear, Parameters};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("checkpoint was saved for graph {found}, expected {expected}")]
    GraphHashMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No masking.
    Vanilla,
    /// Body mask at every layer.
    Hard,
    /// Body mask on even layers, unmasked on odd layers.
    Mix,
    /// Learned bias indexed by (head, graph distance) at every layer.
    Soft,
    /// Random symmetric mask with the body mask's sparsity at every layer.
    HardRandom { seed: u64 },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Hard => "hard",
            Variant::Mix => "mix",
            Variant::Soft => "soft",
            Variant::HardRandom { .. } => "hard-random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub use_positional_encoding: bool,
    #[serde(default)]
    pub shared_tokenizer: bool,
    #[serde(default)]
    pub kernel: Kernel,
}

impl EncoderConfig {
    pub fn new(variant: Variant, num_layers: usize, num_heads: usize, d_model: usize, d_ff: usize) -> Self {
        Self {
            variant,
            num_layers,
            num_heads,
            d_model,
            d_ff,
            use_positional_encoding: false,
            shared_tokenizer: false,
            kernel: Kernel::Dense,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.num_layers == 0 {
            return Err(EncoderError::Config("num_layers must be at least 1".into()));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(EncoderError::Attention(AttentionError::IndivisibleHeads {
                d_model: self.d_model,
                heads: self.num_heads,
            }));
        }
        if self.d_ff == 0 {
            return Err(EncoderError::Config("d_ff must be positive".into()));
        }
        Ok(())
    }
}

/// How one layer's attention treats token pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerAttention {
    Full,
    Masked,
    Biased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attention: MultiHeadWeights,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayerParams {
    fn init<R: Rng>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            attention: MultiHeadWeights {
                query: Linear::init(d_model, d_model, rng),
                key: Linear::init(d_model, d_model, rng),
                value: Linear::init(d_model, d_model, rng),
                output: Linear::init(d_model, d_model, rng),
            },
            norm1: LayerNorm::new(d_model),
            ff_in: Linear::init(d_ff, d_model, rng),
            ff_out: Linear::init(d_model, d_ff, rng),
            norm2: LayerNorm::new(d_model),
        }
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.attention.query.visit(&format!("{p}.attn.query"), f);
        self.attention.key.visit(&format!("{p}.attn.key"), f);
        self.attention.value.visit(&format!("{p}.attn.value"), f);
        self.attention.output.visit(&format!("{p}.attn.output"), f);
        self.norm1.visit(&format!("{p}.norm1"), f);
        self.ff_in.visit(&format!("{p}.ff_in"), f);
        self.ff_out.visit(&format!("{p}.ff_out"), f);
        self.norm2.visit(&format!("{p}.norm2"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.attention.query.visit_mut(&format!("{p}.attn.query"), f);
        self.attention.key.visit_mut(&format!("{p}.attn.key"), f);
        self.attention.value.visit_mut(&format!("{p}.attn.value"), f);
        self.attention.output.visit_mut(&format!("{p}.attn.output"), f);
        self.norm1.visit_mut(&format!("{p}.norm1"), f);
        self.ff_in.visit_mut(&format!("{p}.ff_in"), f);
        self.ff_out.visit_mut(&format!("{p}.ff_out"), f);
        self.norm2.visit_mut(&format!("{p}.norm2"), f);
    }
}

/// All trainable tensors of one body transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    /// One per node, or a single shared projection in the ablation mode.
    pub tokenizers: Vec<Linear>,
    pub layers: Vec<EncoderLayerParams>,
    /// `action_dim_i x d_model` per node; empty for sensor-only nodes.
    pub action_heads: Vec<Linear>,
    /// `1 x d_model` per node.
    pub value_heads: Vec<Linear>,
    /// `n x d_model` learned index embeddings.
    pub positional: Option<Array2<f64>>,
    /// `heads x (diameter + 1)` scalar bias per graph distance.
    pub soft_bias: Option<Array2<f64>>,
}

impl Parameters for ParameterStore {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, t) in self.tokenizers.iter().enumerate() {
            t.visit(&format!("tokenizer.{i}"), f);
        }
        if let Some(p) = &self.positional {
            f("positional", crate::nn::slice(p));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layer.{l}"), f);
        }
        if let Some(b) = &self.soft_bias {
            f("soft_bias", crate::nn::slice(b));
        }
        for (i, h) in self.action_heads.iter().enumerate() {
            h.visit(&format!("action_head.{i}"), f);
        }
        for (i, h) in self.value_heads.iter().enumerate() {
            h.visit(&format!("value_head.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, t) in self.tokenizers.iter_mut().enumerate() {
            t.visit_mut(&format!("tokenizer.{i}"), f);
        }
        if let Some(p) = &mut self.positional {
            f("positional", p.as_slice_mut().expect("contiguous"));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layer.{l}"), f);
        }
        if let Some(b) = &mut self.soft_bias {
            f("soft_bias", b.as_slice_mut().expect("contiguous"));
        }
        for (i, h) in self.action_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("action_head.{i}"), f);
        }
        for (i, h) in self.value_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("value_head.{i}"), f);
        }
    }
}

/// Intermediate values of one encoder layer.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights (dense, zeros at masked pairs).
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
    norm1: LayerNormCache,
    after_norm1: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    norm2: LayerNormCache,
}

/// Everything recorded by a cached forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    obs: Array2<f64>,
    layers: Vec<LayerCache>,
    features: Array2<f64>,
}

impl ForwardCache {
    /// Stacked `batch * n` feature rows.
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn batch_size(&self) -> usize {
        self.obs.nrows()
    }
}

fn stack(x: Array3<f64>) -> Array2<f64> {
    let (b, n, d) = x.dim();
    x.into_shape_with_order((b * n, d)).expect("standard layout")
}

fn unstack(x: ArrayView2<'_, f64>, n: usize) -> ArrayView3<'_, f64> {
    let (rows, d) = x.dim();
    x.into_shape_with_order((rows / n, n, d)).expect("standard layout")
}

/// A body transformer bound to one embodiment graph and configuration.
#[derive(Debug, Clone)]
pub struct BodyTransformer {
    graph: EmbodimentGraph,
    alloc: Allocation,
    cfg: EncoderConfig,
    schedule: Vec<LayerAttention>,
    mask: AttentionMask,
    compressed: RowCompressedMask,
    distances: Vec<Vec<usize>>,
    diameter: usize,
    max_obs_dim: usize,
}

impl BodyTransformer {
    pub fn new(graph: EmbodimentGraph, alloc: Allocation, cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let n = graph.len();
        if alloc.obs_ranges.len() != n || alloc.action_ranges.len() != n {
            return Err(EncoderError::Shape(format!("allocation does not cover {n} nodes")));
        }
        let mask = match cfg.variant {
            Variant::HardRandom { seed } => {
                random_mask(n, graph.build_mask().zero_fraction(), seed)?
            }
            _ => graph.build_mask(),
        };
        let schedule = (0..cfg.num_layers)
            .map(|l| match cfg.variant {
                Variant::Vanilla => LayerAttention::Full,
                Variant::Hard | Variant::HardRandom { .. } => LayerAttention::Masked,
                Variant::Mix if l % 2 == 0 => LayerAttention::Masked,
                Variant::Mix => LayerAttention::Full,
                Variant::Soft => LayerAttention::Biased,
            })
            .collect();
        let distances = graph.shortest_path_matrix();
        let diameter = graph.diameter();
        let max_obs_dim = graph.nodes().iter().map(|s| s.obs_dim).max().unwrap_or(0);
        let compressed = RowCompressedMask::new(&mask);
        Ok(Self { graph, alloc, cfg, schedule, mask, compressed, distances, diameter, max_obs_dim })
    }

    /// Uses the default contiguous per-node allocation.
    pub fn with_default_allocation(graph: EmbodimentGraph, cfg: EncoderConfig) -> Result<Self, EncoderError> {
        let alloc = Allocation::from_graph(&graph);
        Self::new(graph, alloc, cfg)
    }

    pub fn graph(&self) -> &EmbodimentGraph {
        &self.graph
    }

    pub fn allocation(&self) -> &Allocation {
        &self.alloc
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &[LayerAttention] {
        &self.schedule
    }

    /// The mask used by masked layers (body mask, or the random mask).
    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    pub fn n(&self) -> usize {
        self.graph.len()
    }

    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.cfg.d_model;
        let n = self.n();
        let tokenizers = if self.cfg.shared_tokenizer {
            vec![Linear::init(d, self.max_obs_dim, &mut rng)]
        } else {
            self.graph.nodes().iter().map(|s| Linear::init(d, s.obs_dim, &mut rng)).collect()
        };
        let positional = self
            .cfg
            .use_positional_encoding
            .then(|| Array2::from_shape_fn((n, d), |_| rng.random_range(-0.1..0.1)));
        let layers = (0..self.cfg.num_layers)
            .map(|_| EncoderLayerParams::init(d, self.cfg.d_ff, &mut rng))
            .collect();
        let action_heads =
            self.graph.nodes().iter().map(|s| Linear::init(s.action_dim, d, &mut rng)).collect();
        let value_heads = (0..n).map(|_| Linear::init(1, d, &mut rng)).collect();
        let soft_bias = (self.cfg.variant == Variant::Soft)
            .then(|| Array2::zeros((self.cfg.num_heads, self.diameter + 1)));
        ParameterStore { tokenizers, layers, action_heads, value_heads, positional, soft_bias }
    }

    /// Closed-form parameter count for this graph and configuration.
    pub fn expected_param_count(&self) -> usize {
        let d = self.cfg.d_model;
        let n = self.n();
        let tokenizer = if self.cfg.shared_tokenizer {
            d * self.max_obs_dim + d
        } else {
            self.graph.nodes().iter().map(|s| d * s.obs_dim + d).sum()
        };
        let layer = 4 * (d * d + d) + 4 * d + (self.cfg.d_ff * d + self.cfg.d_ff) + (d * self.cfg.d_ff + d);
        let actions: usize = self.graph.nodes().iter().map(|s| s.action_dim * (d + 1)).sum();
        let values = n * (d + 1);
        let positional = if self.cfg.use_positional_encoding { n * d } else { 0 };
        let soft = if self.cfg.variant == Variant::Soft {
            self.cfg.num_heads * (self.diameter + 1)
        } else {
            0
        };
        tokenizer + self.cfg.num_layers * layer + actions + values + positional + soft
    }

    fn check_obs(&self, obs: &ArrayView2<'_, f64>) -> Result<(), EncoderError> {
        if obs.ncols() != self.alloc.obs_width() || obs.nrows() == 0 {
            return Err(EncoderError::Shape(format!(
                "observations {:?}, allocation expects width {}",
                obs.dim(),
                self.alloc.obs_width()
            )));
        }
        Ok(())
    }

    /// Features are `batch * n` stacked rows of width `d_model`; returns the batch size.
    fn check_features(&self, features: &ArrayView2<'_, f64>) -> Result<usize, EncoderError> {
        let n = self.n();
        if features.nrows() == 0 || !features.nrows().is_multiple_of(n) || features.ncols() != self.cfg.d_model {
            return Err(EncoderError::Shape(format!(
                "features {:?}, expected (k * {n}, {})",
                features.dim(),
                self.cfg.d_model
            )));
        }
        Ok(features.nrows() / n)
    }

    fn check_single(&self, features: &ArrayView2<'_, f64>) -> Result<(), EncoderError> {
        if self.check_features(features)? != 1 {
            return Err(EncoderError::Shape(format!("expected {} feature rows, got {}", self.n(), features.nrows())));
        }
        Ok(())
    }

    /// Tokenizer input for node `i` across a batch, zero-padded when the
    /// tokenizer is shared.
    fn node_inputs<'a>(&self, obs: ArrayView2<'a, f64>, node: usize) -> CowArray<'a, f64, Ix2> {
        let slice = obs.slice_move(s![.., self.alloc.obs_ranges[node].clone()]);
        if self.cfg.shared_tokenizer {
            let mut padded = Array2::zeros((slice.nrows(), self.max_obs_dim));
            padded.slice_mut(s![.., ..slice.ncols()]).assign(&slice);
            CowArray::from(padded)
        } else {
            CowArray::from(slice)
        }
    }

    fn tokenizer_index(&self, node: usize) -> usize {
        if self.cfg.shared_tokenizer {
            0
        } else {
            node
        }
    }

    /// One token per node: `W_i obs_i + b_i`, plus the index embedding.
    pub fn tokenize(&self, obs: ArrayView1<'_, f64>, params: &ParameterStore) -> Result<Array2<f64>, EncoderError> {
        self.tokenize_batch(obs.insert_axis(Axis(0)), params)
    }

    /// Tokenizes each row of `obs`; sample `b`'s tokens are rows `b*n..(b+1)*n`.
    pub fn tokenize_batch(&self, obs: ArrayView2<'_, f64>, params: &ParameterStore) -> Result<Array2<f64>, EncoderError> {
        self.check_obs(&obs)?;
        let (batch, n, d) = (obs.nrows(), self.n(), self.cfg.d_model);
        let mut tokens = Array3::zeros((batch, n, d));
        for i in 0..n {
            let x = self.node_inputs(obs, i);
            let t = params.tokenizers[self.tokenizer_index(i)].forward(x.view());
            tokens.slice_mut(s![.., i, ..]).assign(&t);
        }
        if let Some(p) = &params.positional {
            tokens += p;
        }
        Ok(stack(tokens))
    }

    fn soft_bias_matrix(&self, table: &Array2<f64>, head: usize) -> Array2<f64> {
        let n = self.n();
        Array2::from_shape_fn((n, n), |(i, j)| table[[head, self.distances[i][j]]])
    }

    fn head_weights(
        &self,
        mode: LayerAttention,
        qh: ArrayView2<'_, f64>,
        kh: ArrayView2<'_, f64>,
        bias: Option<&Array2<f64>>,
    ) -> Array2<f64> {
        match mode {
            LayerAttention::Full => dense_weights(qh, kh, Logits::Plain, &mut NoTally),
            LayerAttention::Masked => match self.cfg.kernel {
                Kernel::Dense => dense_weights(qh, kh, Logits::Masked(&self.mask), &mut NoTally),
                Kernel::Sparse => sparse_weights(qh, kh, &self.compressed, &mut NoTally),
            },
            LayerAttention::Biased => {
                let bias = bias.expect("soft variant carries a bias table");
                dense_weights(qh, kh, Logits::Biased(bias.view()), &mut NoTally)
            }
        }
    }

    fn layer_forward(
        &self,
        mode: LayerAttention,
        x: Array2<f64>,
        p: &EncoderLayerParams,
        params: &ParameterStore,
    ) -> (Array2<f64>, LayerCache) {
        let n = self.n();
        let batch = x.nrows() / n;
        let heads = self.cfg.num_heads;
        let dh = self.cfg.d_model / heads;
        let q = p.attention.query.forward(x.view());
        let k = p.attention.key.forward(x.view());
        let v = p.attention.value.forward(x.view());
        let biases: Vec<Array2<f64>> = match (mode, &params.soft_bias) {
            (LayerAttention::Biased, Some(table)) => (0..heads).map(|h| self.soft_bias_matrix(table, h)).collect(),
            _ => Vec::new(),
        };
        let mut concat = Array2::zeros(x.dim());
        let mut weights = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for h in 0..heads {
                let block = s![b * n..(b + 1) * n, h * dh..(h + 1) * dh];
                let w = self.head_weights(mode, q.slice(block), k.slice(block), biases.get(h));
                concat.slice_mut(block).assign(&apply_weights(w.view(), v.slice(block), &mut NoTally));
                weights.push(w);
            }
        }
        let attended = p.attention.output.forward(concat.view());
        let (after_norm1, norm1) = p.norm1.forward((&x + &attended).view());
        let hidden_pre = p.ff_in.forward(after_norm1.view());
        let hidden = hidden_pre.mapv(|h| h.max(0.0));
        let ff = p.ff_out.forward(hidden.view());
        let (out, norm2) = p.norm2.forward((&after_norm1 + &ff).view());
        let cache = LayerCache {
            input: x,
            q,
            k,
            v,
            weights,
            concat,
            norm1,
            after_norm1,
            hidden_pre,
            hidden,
            norm2,
        };
        (out, cache)
    }

    /// Runs the encoder stack over stacked token rows.
    pub fn encode(&self, tokens: ArrayView2<'_, f64>, params: &ParameterStore) -> Result<Array2<f64>, EncoderError> {
        self.check_features(&tokens)?;
        let mut x = tokens.to_owned();
        for (mode, p) in self.schedule.iter().zip(&params.layers) {
            x = self.layer_forward(*mode, x, p, params).0;
        }
        Ok(x)
    }

    /// Per-node action projections concatenated in allocation order.
    pub fn detokenize_actions(
        &self,
        features: ArrayView2<'_, f64>,
        params: &ParameterStore,
    ) -> Result<Array1<f64>, EncoderError> {
        self.check_single(&features)?;
        Ok(self.detokenize_actions_batch(features, params)?.row(0).to_owned())
    }

    /// One action row per sample.
    pub fn detokenize_actions_batch(
        &self,
        features: ArrayView2<'_, f64>,
        params: &ParameterStore,
    ) -> Result<Array2<f64>, EncoderError> {
        let batch = self.check_features(&features)?;
        let features = features.as_standard_layout();
        let f3 = unstack(features.view(), self.n());
        let mut out = Array2::zeros((batch, self.alloc.action_width()));
        for (i, head) in params.action_heads.iter().enumerate() {
            let range = self.alloc.action_ranges[i].clone();
            if !range.is_empty() {
                out.slice_mut(s![.., range]).assign(&head.forward(f3.slice(s![.., i, ..])));
            }
        }
        Ok(out)
    }

    /// Per-node scalar values averaged over all nodes.
    pub fn detokenize_value(&self, features: ArrayView2<'_, f64>, params: &ParameterStore) -> Result<f64, EncoderError> {
        self.check_single(&features)?;
        Ok(self.detokenize_value_batch(features, params)?[0])
    }

    pub fn detokenize_value_batch(
        &self,
        features: ArrayView2<'_, f64>,
        params: &ParameterStore,
    ) -> Result<Array1<f64>, EncoderError> {
        let batch = self.check_features(&features)?;
        let features = features.as_standard_layout();
        let f3 = unstack(features.view(), self.n());
        let mut total = Array1::zeros(batch);
        for (i, h) in params.value_heads.iter().enumerate() {
            total += &h.forward(f3.slice(s![.., i, ..])).column(0);
        }
        Ok(total / self.n() as f64)
    }

    pub fn policy_forward(&self, obs: ArrayView1<'_, f64>, params: &ParameterStore) -> Result<Array1<f64>, EncoderError> {
        Ok(self.policy_forward_batch(obs.insert_axis(Axis(0)), params)?.row(0).to_owned())
    }

    pub fn policy_forward_batch(&self, obs: ArrayView2<'_, f64>, params: &ParameterStore) -> Result<Array2<f64>, EncoderError> {
        let tokens = self.tokenize_batch(obs, params)?;
        let features = self.encode(tokens.view(), params)?;
        self.detokenize_actions_batch(features.view(), params)
    }

    pub fn value_forward(&self, obs: ArrayView1<'_, f64>, params: &ParameterStore) -> Result<f64, EncoderError> {
        let tokens = self.tokenize(obs, params)?;
        let features = self.encode(tokens.view(), params)?;
        self.detokenize_value(features.view(), params)
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn forward_cached(&self, obs: ArrayView1<'_, f64>, params: &ParameterStore) -> Result<ForwardCache, EncoderError> {
        self.forward_batch_cached(obs.insert_axis(Axis(0)), params)
    }

    pub fn forward_batch_cached(&self, obs: ArrayView2<'_, f64>, params: &ParameterStore) -> Result<ForwardCache, EncoderError> {
        let mut x = self.tokenize_batch(obs, params)?;
        let mut layers = Vec::with_capacity(self.cfg.num_layers);
        for (mode, p) in self.schedule.iter().zip(&params.layers) {
            let (out, cache) = self.layer_forward(*mode, x, p, params);
            layers.push(cache);
            x = out;
        }
        Ok(ForwardCache { obs: obs.to_owned(), layers, features: x })
    }

    /// Accumulates into `grad` the gradient of a loss whose derivatives with
    /// respect to the action vector and the averaged value are given.
    pub fn backward(
        &self,
        params: &ParameterStore,
        cache: &ForwardCache,
        grad_action: ArrayView1<'_, f64>,
        grad_value: f64,
        grad: &mut ParameterStore,
    ) {
        let gv = [grad_value];
        self.backward_batch(params, cache, grad_action.insert_axis(Axis(0)), ArrayView1::from(&gv), grad);
    }

    /// Batched [`Self::backward`]: one row of action gradients and one value
    /// gradient per cached sample.
    pub fn backward_batch(
        &self,
        params: &ParameterStore,
        cache: &ForwardCache,
        grad_actions: ArrayView2<'_, f64>,
        grad_values: ArrayView1<'_, f64>,
        grad: &mut ParameterStore,
    ) {
        let n = self.n();
        let batch = cache.batch_size();
        let feats = unstack(cache.features.view(), n);
        let mut dx = Array3::<f64>::zeros((batch, n, self.cfg.d_model));
        let with_value = grad_values.iter().any(|&g| g != 0.0);
        let gv = (&grad_values / n as f64).insert_axis(Axis(1));
        for i in 0..n {
            let feat = feats.slice(s![.., i, ..]);
            let range = self.alloc.action_ranges[i].clone();
            if !range.is_empty() {
                let g = grad_actions.slice(s![.., range]);
                let d = params.action_heads[i].backward(feat, g, &mut grad.action_heads[i]);
                dx.slice_mut(s![.., i, ..]).zip_mut_with(&d, |a, b| *a += b);
            }
            if with_value {
                let d = params.value_heads[i].backward(feat, gv.view(), &mut grad.value_heads[i]);
                dx.slice_mut(s![.., i, ..]).zip_mut_with(&d, |a, b| *a += b);
            }
        }
        let mut dx = stack(dx);
        for l in (0..self.cfg.num_layers).rev() {
            dx = self.layer_backward(l, params, &cache.layers[l], dx, grad);
        }
        self.tokenizer_backward(params, cache, dx, grad);
    }

    fn layer_backward(
        &self,
        l: usize,
        params: &ParameterStore,
        c: &LayerCache,
        grad_out: Array2<f64>,
        grad: &mut ParameterStore,
    ) -> Array2<f64> {
        let p = &params.layers[l];
        let mode = self.schedule[l];
        let n = self.n();
        let batch = grad_out.nrows() / n;
        let heads = self.cfg.num_heads;
        let dh = self.cfg.d_model / heads;
        let scale = (dh as f64).sqrt();

        // out = LN2(after_norm1 + ff_out(relu(ff_in(after_norm1))))
        let d_res2 = p.norm2.backward(&c.norm2, grad_out.view(), &mut grad.layers[l].norm2);
        let d_hidden = p.ff_out.backward(c.hidden.view(), d_res2.view(), &mut grad.layers[l].ff_out);
        let mut d_pre = d_hidden;
        d_pre.zip_mut_with(&c.hidden_pre, |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        let mut d_after1 = p.ff_in.backward(c.after_norm1.view(), d_pre.view(), &mut grad.layers[l].ff_in);
        d_after1 += &d_res2;

        // after_norm1 = LN1(input + output(concat))
        let d_res1 = p.norm1.backward(&c.norm1, d_after1.view(), &mut grad.layers[l].norm1);
        let d_concat = p
            .attention
            .output
            .backward(c.concat.view(), d_res1.view(), &mut grad.layers[l].attention.output);

        let mut dq = Array2::<f64>::zeros(c.q.dim());
        let mut dk = Array2::<f64>::zeros(c.k.dim());
        let mut dv = Array2::<f64>::zeros(c.v.dim());
        for b in 0..batch {
            for h in 0..heads {
                let block = s![b * n..(b + 1) * n, h * dh..(h + 1) * dh];
                let w = &c.weights[b * heads + h];
                let d_out = d_concat.slice(block);
                // O = W V
                dv.slice_mut(block).assign(&w.t().dot(&d_out));
                let dw = d_out.dot(&c.v.slice(block).t());
                // Row softmax: dS = W ⊙ (dW - rowsum(W ⊙ dW)); zero wherever W is zero.
                let mut ds = dw;
                for (mut ds_row, w_row) in ds.rows_mut().into_iter().zip(w.rows()) {
                    let inner: f64 = ds_row.iter().zip(w_row.iter()).map(|(a, b)| a * b).sum();
                    ds_row.zip_mut_with(&w_row, |g, &wij| *g = wij * (*g - inner));
                }
                if mode == LayerAttention::Biased {
                    let table = grad.soft_bias.as_mut().expect("soft variant carries a bias table");
                    for ((i, j), &g) in ds.indexed_iter() {
                        table[[h, self.distances[i][j]]] += g;
                    }
                }
                ds.mapv_inplace(|g| g / scale);
                dq.slice_mut(block).assign(&ds.dot(&c.k.slice(block)));
                dk.slice_mut(block).assign(&ds.t().dot(&c.q.slice(block)));
            }
        }
        let ga = &mut grad.layers[l].attention;
        let mut dx = p.attention.query.backward(c.input.view(), dq.view(), &mut ga.query);
        dx += &p.attention.key.backward(c.input.view(), dk.view(), &mut ga.key);
        dx += &p.attention.value.backward(c.input.view(), dv.view(), &mut ga.value);
        dx += &d_res1;
        dx
    }

    fn tokenizer_backward(
        &self,
        params: &ParameterStore,
        cache: &ForwardCache,
        d_tokens: Array2<f64>,
        grad: &mut ParameterStore,
    ) {
        let d3 = unstack(d_tokens.view(), self.n());
        if let Some(gp) = &mut grad.positional {
            *gp += &d3.sum_axis(Axis(0));
        }
        for i in 0..self.n() {
            let x = self.node_inputs(cache.obs.view(), i);
            let t = self.tokenizer_index(i);
            params.tokenizers[t].accumulate(x.view(), d3.slice(s![.., i, ..]), &mut grad.tokenizers[t]);
        }
    }

    /// Nodes whose token, when perturbed, changes the encoder output row of
    /// `node`. Measured at `tokens` with a fixed perturbation per input row.
    pub fn measured_influence(
        &self,
        params: &ParameterStore,
        tokens: ArrayView2<'_, f64>,
        node: usize,
    ) -> Result<Vec<usize>, EncoderError> {
        self.check_single(&tokens)?;
        if node >= self.n() {
            return Err(EncoderError::Shape(format!("node {node} out of range for n={}", self.n())));
        }
        let base = self.encode(tokens, params)?;
        let mut out = Vec::new();
        for j in 0..self.n() {
            let mut bumped = tokens.to_owned();
            bumped.row_mut(j).iter_mut().enumerate().for_each(|(c, v)| *v += 0.5 + 0.1 * c as f64);
            let moved = self.encode(bumped.view(), params)?;
            if moved.row(node) != base.row(node) {
                out.push(j);
            }
        }
        Ok(out)
    }

    /// Nodes whose inputs can influence the output at `node`, obtained by
    /// composing the per-layer attention patterns from the last layer down.
    pub fn receptive_field(&self, node: usize) -> Vec<usize> {
        let n = self.n();
        let mut reach = vec![false; n];
        reach[node] = true;
        for mode in self.schedule.iter().rev() {
            match mode {
                LayerAttention::Full | LayerAttention::Biased => return (0..n).collect(),
                LayerAttention::Masked => {
                    let mut next = vec![false; n];
                    for i in (0..n).filter(|&i| reach[i]) {
                        for j in 0..n {
                            next[j] |= self.mask.get(i, j);
                        }
                    }
                    reach = next;
                }
            }
        }
        (0..n).filter(|&j| reach[j]).collect()
    }

    /// Saves config, graph hash and every named tensor as JSON.
    pub fn save_checkpoint(&self, params: &ParameterStore, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let ckpt = Checkpoint::capture(&self.cfg, &self.graph, params)?;
        std::fs::write(path, ckpt.to_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(&self, path: impl AsRef<Path>) -> Result<ParameterStore, EncoderError> {
        let ckpt = Checkpoint::from_json(&std::fs::read_to_string(path)?)?;
        let cfg: EncoderConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
        if cfg != self.cfg {
            return Err(EncoderError::Checkpoint("config differs from this model".into()));
        }
        let mut params = self.init_params(0);
        ckpt.restore(&self.graph, &mut params)?;
        Ok(params)
    }
}

/// Serialized parameters bound to a model config and a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub graph_hash: String,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn capture<C: Serialize, P: Parameters>(
        config: &C,
        graph: &EmbodimentGraph,
        params: &P,
    ) -> Result<Self, EncoderError> {
        let mut tensors = BTreeMap::new();
        params.visit(&mut |name, t| {
            tensors.insert(name.to_string(), t.to_vec());
        });
        Ok(Self {
            config: serde_json::to_value(config).map_err(|e| EncoderError::Checkpoint(e.to_string()))?,
            graph_hash: graph.content_hash(),
            tensors,
        })
    }

    /// Copies tensors into `params`, which must already have the right shapes.
    pub fn restore<P: Parameters>(&self, graph: &EmbodimentGraph, params: &mut P) -> Result<(), EncoderError> {
        let expected = graph.content_hash();
        if expected != self.graph_hash {
            return Err(EncoderError::GraphHashMismatch { expected, found: self.graph_hash.clone() });
        }
        let mut problem = None;
        let mut seen = 0;
        params.visit_mut(&mut |name, t| match self.tensors.get(name) {
            Some(src) if src.len() == t.len() => {
                t.copy_from_slice(src);
                seen += 1;
            }
            Some(src) => {
                problem.get_or_insert(format!("tensor {name} has {} values, expected {}", src.len(), t.len()));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        });
        if let Some(p) = problem {
            return Err(EncoderError::Checkpoint(p));
        }
        if seen != self.tensors.len() {
            return Err(EncoderError::Checkpoint("checkpoint holds unexpected tensors".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, EncoderError> {
        serde_json::to_string(self).map_err(|e| EncoderError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        serde_json::from_str(text).map_err(|e| EncoderError::Checkpoint(e.to_string()))
    }
}
