//! Multi-seed training experiments driven by a TOML config, with per-epoch
//! CSV curves and a summary across seeds.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Kernel;
use crate::encoder::{BodyTransformer, EncoderConfig, EncoderError, Variant};
use crate::graph::{EmbodimentGraph, GraphError};
use crate::nn::Parameters;
use crate::records::RecordsError;
pub use crate::records::{read_csv, write_csv};
use crate::training::{generate_task, train, MlpBaselineConfig, MlpPolicy, Policy, SyntheticTask, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Records(#[from] RecordsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphSource {
    Chain { len: usize, obs_dim: usize, action_dim: usize },
    Star { leaves: usize, obs_dim: usize, action_dim: usize },
    File(PathBuf),
}

impl GraphSource {
    pub fn build(&self) -> Result<EmbodimentGraph, GraphError> {
        match self {
            GraphSource::Chain { len, obs_dim, action_dim } => EmbodimentGraph::chain(*len, *obs_dim, *action_dim),
            GraphSource::Star { leaves, obs_dim, action_dim } => EmbodimentGraph::star(*leaves, *obs_dim, *action_dim),
            GraphSource::File(path) => EmbodimentGraph::load(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub graph: GraphSource,
    pub radius: usize,
    pub noise: f64,
    pub train_samples: usize,
    pub validation_samples: usize,
    /// Added to each run seed when generating that run's dataset.
    #[serde(default)]
    pub seed: u64,
}

/// Encoder sizes shared by every variant in the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSizes {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub use_positional_encoding: bool,
    #[serde(default)]
    pub kernel: Kernel,
}

impl EncoderSizes {
    pub fn config(&self, variant: Variant) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(variant, self.num_layers, self.num_heads, self.d_model, self.d_ff);
        cfg.use_positional_encoding = self.use_positional_encoding;
        cfg.kernel = self.kernel;
        cfg
    }
}

/// MLP baseline whose hidden width is chosen to match the parameter count of
/// the first variant, or of a Hard encoder of the configured sizes when no
/// variants are listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub d_model: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub encoder: EncoderSizes,
    /// A random-mask variant's seed is offset by the run seed.
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub mlp: Option<MlpSpec>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.variants.is_empty() && self.mlp.is_none() {
            return Err(ExperimentError::Config("no models to train".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("no seeds".into()));
        }
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub model: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub seed: u64,
    pub params: usize,
    pub final_train_mse: f64,
    pub final_val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub params: usize,
    pub seeds: usize,
    pub mean_val_mse: f64,
    /// Sample standard deviation across seeds (0 for one seed).
    pub std_val_mse: f64,
    pub min_val_mse: f64,
    pub max_val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub curves: Vec<CurveRecord>,
    pub runs: Vec<RunSummary>,
    pub summary: Vec<ModelSummary>,
}

#[derive(Debug, Clone)]
enum ModelKind {
    Encoder(Variant),
    Mlp(MlpBaselineConfig),
}

impl ModelKind {
    fn name(&self) -> String {
        match self {
            ModelKind::Encoder(v) => v.name().to_string(),
            ModelKind::Mlp(_) => "mlp".to_string(),
        }
    }
}

fn fit<M: Policy>(model: &M, task: &SyntheticTask, cfg: &TrainConfig, name: &str, seed: u64) -> Result<(Vec<CurveRecord>, RunSummary), ExperimentError> {
    let report = train(model, task, cfg)?;
    let curves: Vec<CurveRecord> = report
        .curve
        .iter()
        .map(|e| CurveRecord { model: name.to_string(), seed, epoch: e.epoch, train_mse: e.train_mse, val_mse: e.val_mse })
        .collect();
    let last = report.curve.last().expect("at least one epoch");
    let run = RunSummary {
        model: name.to_string(),
        seed,
        params: report.params.num_params(),
        final_train_mse: last.train_mse,
        final_val_mse: last.val_mse,
    };
    Ok((curves, run))
}

fn run_one(cfg: &ExperimentConfig, graph: &EmbodimentGraph, kind: &ModelKind, seed: u64) -> Result<(Vec<CurveRecord>, RunSummary), ExperimentError> {
    let t = &cfg.task;
    let task = generate_task(graph, t.radius, t.noise, t.train_samples, t.validation_samples, t.seed.wrapping_add(seed))?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let name = kind.name();
    match kind {
        ModelKind::Encoder(variant) => {
            let variant = match *variant {
                Variant::HardRandom { seed: base } => Variant::HardRandom { seed: base.wrapping_add(seed) },
                v => v,
            };
            let model = BodyTransformer::new(graph.clone(), task.alloc.clone(), cfg.encoder.config(variant))?;
            fit(&model, &task, &train_cfg, &name, seed)
        }
        ModelKind::Mlp(mlp) => {
            let model = MlpPolicy::new(graph.clone(), task.alloc.clone(), mlp.clone())?;
            fit(&model, &task, &train_cfg, &name, seed)
        }
    }
}

/// Trains every model on every seed. Runs execute in parallel but results
/// are ordered by model, then seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let graph = cfg.task.graph.build()?;
    let mut kinds: Vec<ModelKind> = cfg.variants.iter().map(|v| ModelKind::Encoder(*v)).collect();
    if let Some(mlp) = &cfg.mlp {
        let reference = BodyTransformer::with_default_allocation(graph.clone(), cfg.encoder.config(cfg.variants.first().copied().unwrap_or(Variant::Hard)))?;
        let matched = MlpBaselineConfig::matched(&graph, mlp.d_model, mlp.depth, reference.expected_param_count());
        kinds.push(ModelKind::Mlp(matched));
    }
    let jobs: Vec<(&ModelKind, u64)> = kinds.iter().flat_map(|k| cfg.seeds.iter().map(move |&s| (k, s))).collect();
    let results: Vec<(Vec<CurveRecord>, RunSummary)> = jobs
        .par_iter()
        .map(|(kind, seed)| run_one(cfg, &graph, kind, *seed))
        .collect::<Result<_, _>>()?;
    let mut curves = Vec::new();
    let mut runs = Vec::new();
    for (c, r) in results {
        curves.extend(c);
        runs.push(r);
    }
    let summary = summarize(&runs);
    Ok(ExperimentResult { curves, runs, summary })
}

/// Groups runs by model in first-appearance order.
pub fn summarize(runs: &[RunSummary]) -> Vec<ModelSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.model.as_str()) {
            names.push(&r.model);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.model == name).collect();
            let vals: Vec<f64> = group.iter().map(|r| r.final_val_mse).collect();
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            ModelSummary {
                model: name.to_string(),
                params: group[0].params,
                seeds: vals.len(),
                mean_val_mse: mean,
                std_val_mse: std,
                min_val_mse: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max_val_mse: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Fixed-width text table of the per-model summary.
pub fn summary_table(summary: &[ModelSummary]) -> String {
    let mut out = format!(
        "{:<14} {:>8} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
        "model", "params", "seeds", "mean_val", "std_val", "min_val", "max_val"
    );
    for s in summary {
        out.push_str(&format!(
            "{:<14} {:>8} {:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}\n",
            s.model, s.params, s.seeds, s.mean_val_mse, s.std_val_mse, s.min_val_mse, s.max_val_mse
        ));
    }
    out
}

pub const CURVE_HEADER: [&str; 5] = ["model", "seed", "epoch", "train_mse", "val_mse"];
pub const RUN_HEADER: [&str; 5] = ["model", "seed", "params", "final_train_mse", "final_val_mse"];

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seeds = [0, 1]
variants = ["hard", { hard-random = { seed = 5 } }]

[task]
graph = { chain = { len = 4, obs_dim = 2, action_dim = 1 } }
radius = 1
noise = 0.01
train_samples = 32
validation_samples = 8

[encoder]
num_layers = 2
num_heads = 1
d_model = 8
d_ff = 16

[mlp]
d_model = 8
depth = 2

[train]
learning_rate = 0.01
batch_size = 8
epochs = 2
"#;

    #[test]
    fn config_parses_and_roundtrips() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.variants[1], Variant::HardRandom { seed: 5 });
        assert_eq!(cfg.train.optimizer, crate::training::OptimizerKind::default());
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
    }

    #[test]
    fn experiment_is_deterministic_and_ordered() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        let order: Vec<(&str, u64)> = a.runs.iter().map(|r| (r.model.as_str(), r.seed)).collect();
        assert_eq!(order, [("hard", 0), ("hard", 1), ("hard-random", 0), ("hard-random", 1), ("mlp", 0), ("mlp", 1)]);
        assert_eq!(a.curves.len(), 6 * 2);
        assert_eq!(a.summary.len(), 3);
        let table = summary_table(&a.summary);
        assert!(table.lines().count() == 4 && table.contains("hard-random"));
        let hard = a.summary[0].params as f64;
        assert!((a.summary[2].params as f64 - hard).abs() <= 0.1 * hard);
    }

    #[test]
    fn summary_statistics() {
        let run = |seed, v| RunSummary { model: "m".into(), seed, params: 3, final_train_mse: 0.0, final_val_mse: v };
        let s = summarize(&[run(0, 1.0), run(1, 2.0), run(2, 3.0)]);
        assert_eq!(s[0].mean_val_mse, 2.0);
        assert_eq!(s[0].std_val_mse, 1.0);
        assert_eq!((s[0].min_val_mse, s[0].max_val_mse), (1.0, 3.0));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let records = vec![
            CurveRecord { model: "hard".into(), seed: 3, epoch: 0, train_mse: 0.1 + 0.2, val_mse: 1e-300 },
            CurveRecord { model: "mlp".into(), seed: 4, epoch: 1, train_mse: std::f64::consts::PI, val_mse: 2.5e-4 },
        ];
        let mut buf = Vec::new();
        write_csv(&records, &mut buf, &CURVE_HEADER).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("model,seed,epoch,train_mse,val_mse\n"));
        let back: Vec<CurveRecord> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, records);

        let mut empty = Vec::new();
        write_csv::<CurveRecord, _>(&[], &mut empty, &CURVE_HEADER).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "model,seed,epoch,train_mse,val_mse\n");
    }
}
