use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use body_transformer::bench::{
    crossovers, report_flops, run_scaling_bench, run_sparsity_sweep, speedup_table, speedups, summarize,
    zero_fraction_grid, BenchPlan, BENCH_HEADER,
};
use body_transformer::encoder::{BodyTransformer, EncoderConfig, Variant};
use body_transformer::experiment::{
    run_experiment, summary_table, EncoderSizes, ExperimentConfig, GraphSource, MlpSpec, TaskSpec, CURVE_HEADER,
    RUN_HEADER,
};
use body_transformer::graph::{random_mask, EmbodimentGraph};
use body_transformer::records::emit_csv;
use body_transformer::training::{OptimizerKind, Schedule, TrainConfig};

#[derive(Parser)]
#[command(name = "bot", version, about = "Body-graph masked attention: masks, kernels, FLOPs, benchmarks and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build attention masks.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Time the dense and sparse masked kernels.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Print analytical FLOP counts of both kernels.
    Flops(FlopsArgs),
    /// Train on a synthetic graph-local imitation task.
    Train(TrainArgs),
    /// Inspect trained or freshly initialized models.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Body mask I + A of a graph file.
    Build {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random symmetric mask with unit diagonal.
    Random {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        zero_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    Scaling {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
        nodes: Vec<usize>,
        #[arg(long, default_value_t = 0.908)]
        zero_fraction: f64,
        #[arg(long, default_value_t = 10000)]
        trials: u64,
        /// Untimed calls per cell before measuring.
        #[arg(long, default_value_t = 10)]
        warmup: u64,
        #[command(flatten)]
        common: BenchArgs,
    },
    Sparsity {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        nodes: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        zf_min: f64,
        #[arg(long, default_value_t = 0.95)]
        zf_max: f64,
        #[arg(long, default_value_t = 0.05)]
        zf_step: f64,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        #[command(flatten)]
        common: BenchArgs,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    dk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    nodes: u64,
    #[arg(long, default_value_t = 64)]
    dk: u64,
    #[arg(long)]
    zero_fraction: f64,
    #[arg(long, default_value_t = 1)]
    c1: u64,
    #[arg(long, default_value_t = 1)]
    c2: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vanilla,
    Hard,
    Mix,
    Soft,
    HardRandom,
    Mlp,
}

#[derive(Args)]
struct TrainArgs {
    /// Full experiment description; other options are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    graph: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hard")]
    variant: VariantArg,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Hidden layers of the MLP baseline, sized to match a Hard encoder.
    #[arg(long, default_value_t = 2)]
    mlp_depth: usize,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 32)]
    d_ff: usize,
    #[arg(long, default_value_t = 1)]
    radius: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 4096)]
    train_samples: usize,
    #[arg(long, default_value_t = 512)]
    val_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    sgd: bool,
    #[arg(long)]
    cosine: bool,
    /// Per-epoch curves.
    #[arg(long)]
    out: PathBuf,
    /// Final losses per run.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Nodes that can influence one node's output.
    ReceptiveField {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum, default_value = "hard")]
        variant: VariantArg,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        node: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn variant(arg: VariantArg, seed: u64) -> Option<Variant> {
    match arg {
        VariantArg::Vanilla => Some(Variant::Vanilla),
        VariantArg::Hard => Some(Variant::Hard),
        VariantArg::Mix => Some(Variant::Mix),
        VariantArg::Soft => Some(Variant::Soft),
        VariantArg::HardRandom => Some(Variant::HardRandom { seed }),
        VariantArg::Mlp => None,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_graph(path: &Path) -> Result<EmbodimentGraph> {
    EmbodimentGraph::load(path).with_context(|| format!("loading graph {}", path.display()))
}

fn mask(cmd: MaskCommand) -> Result<()> {
    let mask = match cmd {
        MaskCommand::Build { ref graph, .. } => load_graph(graph)?.build_mask(),
        MaskCommand::Random { nodes, zero_fraction, seed, .. } => random_mask(nodes, zero_fraction, seed)?,
    };
    let out = match &cmd {
        MaskCommand::Build { out, .. } | MaskCommand::Random { out, .. } => out,
    };
    write_text(out, &mask.to_text())?;
    println!(
        "n={} nonzeros={} zero_fraction={:.6} density={:.6}",
        mask.n(),
        mask.nonzeros(),
        mask.zero_fraction(),
        mask.density()
    );
    Ok(())
}

fn bench(cmd: BenchCommand) -> Result<()> {
    let (records, common, sweep) = match cmd {
        BenchCommand::Scaling { nodes, zero_fraction, trials, warmup, common } => {
            let plan = BenchPlan {
                warmup,
                d_k: common.dk,
                ..BenchPlan::new(nodes, vec![zero_fraction], trials, common.seed)
            };
            (run_scaling_bench(&plan)?, common, false)
        }
        BenchCommand::Sparsity { nodes, zf_min, zf_max, zf_step, trials, common } => {
            let grid = zero_fraction_grid(zf_min, zf_max, zf_step)?;
            (run_sparsity_sweep(&nodes, &grid, trials, common.seed, common.dk)?, common, true)
        }
    };
    emit_csv(&records, &common.out, &BENCH_HEADER)?;
    let sp = speedups(&summarize(&records));
    print!("{}", speedup_table(&sp));
    if sweep {
        for (n, z) in crossovers(&sp) {
            match z {
                Some(z) => println!("n={n}: sparse faster from zeta={z:.4}"),
                None => println!("n={n}: sparse never faster on this grid"),
            }
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => {
            let graph = args.graph.clone().expect("clap requires --graph without --config");
            let sizes = EncoderSizes {
                num_layers: args.layers,
                num_heads: args.heads,
                d_model: args.d_model,
                d_ff: args.d_ff,
                use_positional_encoding: false,
                kernel: Default::default(),
            };
            let (variants, mlp) = match variant(args.variant, 0) {
                Some(v) => (vec![v], None),
                None => (Vec::new(), Some(MlpSpec { d_model: args.d_model, depth: args.mlp_depth })),
            };
            ExperimentConfig {
                task: TaskSpec {
                    graph: GraphSource::File(graph),
                    radius: args.radius,
                    noise: args.noise,
                    train_samples: args.train_samples,
                    validation_samples: args.val_samples,
                    seed: 0,
                },
                encoder: sizes,
                variants,
                mlp,
                train: TrainConfig {
                    optimizer: if args.sgd { OptimizerKind::Sgd } else { OptimizerKind::default() },
                    learning_rate: args.lr,
                    batch_size: args.batch_size,
                    epochs: args.epochs,
                    seed: 0,
                    schedule: if args.cosine { Schedule::Cosine } else { Schedule::Constant },
                    parallel: false,
                },
                seeds: if args.seeds.is_empty() { vec![args.seed] } else { args.seeds.clone() },
            }
        }
    };
    let result = run_experiment(&cfg)?;
    emit_csv(&result.curves, &args.out, &CURVE_HEADER)?;
    if let Some(path) = &args.summary {
        emit_csv(&result.runs, path, &RUN_HEADER)?;
    }
    print!("{}", summary_table(&result.summary));
    Ok(())
}

fn eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::ReceptiveField { graph, variant: v, layers, node, seed } => {
            let graph = load_graph(&graph)?;
            if node >= graph.len() {
                bail!("node {node} out of range for a graph with {} nodes", graph.len());
            }
            let Some(v) = variant(v, seed) else {
                bail!("the MLP baseline has no per-node receptive field");
            };
            let model = BodyTransformer::with_default_allocation(graph, EncoderConfig::new(v, layers, 2, 8, 16))?;
            let params = model.init_params(seed);
            let obs = ndarray::Array1::from_shape_fn(model.allocation().obs_width(), |i| ((i + 1) as f64 * 0.7).sin());
            let tokens = model.tokenize(obs.view(), &params)?;
            let structural = model.receptive_field(node);
            let measured = model.measured_influence(&params, tokens.view(), node)?;
            println!("structural {:?} ({} of {} nodes)", structural, structural.len(), model.n());
            println!("measured   {:?}", measured);
            Ok(())
        }
    }
}

fn flops(args: FlopsArgs) -> Result<()> {
    println!("{}", report_flops(args.nodes, args.dk, args.zero_fraction, args.c1, args.c2)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(cmd) => mask(cmd),
        Command::Bench(cmd) => bench(cmd),
        Command::Flops(args) => flops(args),
        Command::Train(args) => train(args),
        Command::Eval(cmd) => eval(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
