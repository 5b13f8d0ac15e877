//! One PASS/FAIL line per acceptance criterion. Runs without the test
//! harness so the report is always printed: `cargo test --test system_acceptance`.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use body_transformer::attention::{dense_masked_attention, sparse_masked_attention, AttentionInput};
use body_transformer::bench::{run_scaling_bench, speedups, summarize, BenchPlan, BenchRecord, BENCH_HEADER};
use body_transformer::encoder::{BodyTransformer, EncoderConfig, Variant};
use body_transformer::experiment::{
    read_csv, run_experiment, summary_table, write_csv, ExperimentConfig, RunSummary, CURVE_HEADER, RUN_HEADER,
};
use body_transformer::flops::{
    counted_flops, flops_ratio, flops_ratio_limit, masked_flops, vanilla_flops, CountedKernel, FlopsModel,
};
use body_transformer::graph::{random_mask, EmbodimentGraph};
use body_transformer::nn::Parameters;
use body_transformer::records::emit_csv;
use body_transformer::training::{MlpBaselineConfig, MlpPolicy, Policy, ValueObjective};
use common::*;
use ndarray::Array2;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn kernel_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let n = rng.random_range(4..=128);
        let d = rng.random_range(4..=64);
        let zf = rng.random_range(0.0..=1.0 - 1.0 / n as f64);
        let mask = random_mask(n, zf, case).unwrap();
        let input =
            AttentionInput::new(uniform_mat(&mut rng, n, d), uniform_mat(&mut rng, n, d), uniform_mat(&mut rng, n, d))
                .unwrap();
        let dense = dense_masked_attention(&input, &mask).unwrap();
        let sparse = sparse_masked_attention(&input, &mask).unwrap();
        worst = worst.max(max_rel_diff(&dense, &sparse));
    }
    let equivalence_time = start.elapsed();

    let plan = BenchPlan::new(vec![16, 32, 64, 128], vec![0.908], 2000, 7);
    let records = run_scaling_bench(&plan).unwrap();
    let ratios: Vec<(usize, f64)> = speedups(&summarize(&records)).iter().map(|s| (s.n, s.ratio)).collect();
    let at_128 = ratios.last().unwrap().1;
    let monotone = ratios.windows(2).all(|w| w[1].1 >= w[0].1);
    let pass = worst <= 1e-6 && equivalence_time <= Duration::from_secs(120) && at_128 >= 1.2 && monotone;
    let listed: Vec<String> = ratios.iter().map(|(n, r)| format!("n={n}:{r:.3}")).collect();
    outcome(
        pass,
        format!(
            "1000 cases max rel diff {worst:.2e} in {:.1}s; dense/sparse at zeta 0.908 [{}]; >=1.2 at 128: {}; non-decreasing: {}",
            equivalence_time.as_secs_f64(),
            listed.join(" "),
            at_128 >= 1.2,
            monotone
        ),
    )
}

fn flop_exactness() -> Outcome {
    let mut rng = rng(2);
    let mut mismatches = 0;
    for cell in 0..200u64 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let (c1, c2) = (rng.random_range(0..=4), rng.random_range(0..=4));
        let zf = if n == 1 { 0.0 } else { rng.random_range(0.0..=1.0 - 1.0 / n as f64) };
        let mask = random_mask(n, zf, cell).unwrap();
        let input =
            AttentionInput::new(uniform_mat(&mut rng, n, d), uniform_mat(&mut rng, n, d), uniform_mat(&mut rng, n, d))
                .unwrap();
        let vanilla = vanilla_flops(&FlopsModel::dense(n as u64, d as u64, c1, c2).unwrap());
        let masked = masked_flops(&FlopsModel::from_mask(&mask, d as u64, c1, c2).unwrap());
        if counted_flops(CountedKernel::Vanilla, &input, &mask, c1, c2).unwrap() != vanilla {
            mismatches += 1;
        }
        if counted_flops(CountedKernel::Masked, &input, &mask, c1, c2).unwrap() != masked {
            mismatches += 1;
        }
    }
    let start = Instant::now();
    let mut worst = 0.0f64;
    for &eta in &[0.05, 0.092, 0.25, 0.5, 0.75, 1.0] {
        for &d in &[16u64, 64, 128] {
            let ratio = flops_ratio(4096.0, d as f64, eta, 1.0, 1.0);
            let limit = flops_ratio_limit(d, eta, 1.0);
            worst = worst.max((ratio / limit - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && worst <= 0.01 && elapsed < Duration::from_secs(1),
        format!("{mismatches} count mismatches over 200 cells x 2 kernels; ratio at n=4096 within {worst:.2e} of limit"),
    )
}

fn receptive_fields() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(3);
    let mut failures = Vec::new();
    let mut full_cases = 0;
    for g in 0..50u64 {
        let n = rng.random_range(2..=12);
        let graph = if g % 2 == 0 { random_tree(&mut rng, n) } else { random_connected(&mut rng, n) };
        let diameter = graph.diameter();
        for layers in 1..=3 {
            let model =
                BodyTransformer::with_default_allocation(graph.clone(), EncoderConfig::new(Variant::Hard, layers, 1, 8, 16))
                    .unwrap();
            let params = model.init_params(g * 10 + layers as u64);
            let obs = uniform_vec(&mut rng, model.allocation().obs_width());
            for node in 0..n {
                let measured = perturbation_dependencies(&model, &params, &obs, node);
                let ball = graph.ball(node, layers);
                let all_when_covering = layers < diameter || measured.len() == n;
                if layers >= diameter {
                    full_cases += 1;
                }
                if measured != ball || !all_when_covering {
                    failures.push(format!("graph {g} L={layers} node {node}: {measured:?} vs {ball:?}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed <= Duration::from_secs(60),
        format!(
            "{} mismatches, {full_cases} node cases with L >= diameter, {:.1}s{}",
            failures.len(),
            elapsed.as_secs_f64(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

/// Worst group, skipped kink coordinates and total coordinates.
fn worst_group(errors: &std::collections::BTreeMap<String, GroupError>) -> (String, f64, usize, usize) {
    let kinks = errors.values().map(|e| e.kinks).sum();
    let len = errors.values().map(|e| e.len).sum();
    let (name, err) = errors
        .iter()
        .fold((String::new(), 0.0), |acc, (k, e)| if e.relative > acc.1 { (k.clone(), e.relative) } else { acc });
    (name, err, kinks, len)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(4);
    let graph = chain(4);
    let rows = 3;
    let obs = uniform_mat(&mut rng, rows, graph.total_obs_dim());
    let targets = uniform_mat(&mut rng, rows, graph.total_action_dim());
    let mut report = Vec::new();
    let mut worst = 0.0f64;
    let (mut skipped, mut checked) = (0, 0);
    let variants = [Variant::Vanilla, Variant::Hard, Variant::Mix, Variant::Soft, Variant::HardRandom { seed: 11 }];
    for (i, variant) in variants.into_iter().enumerate() {
        let model = BodyTransformer::with_default_allocation(graph.clone(), tiny_config(variant)).unwrap();
        let mut params = model.init_params(40 + i as u64);
        // Nonzero distance biases so their gradients are exercised away from the symmetric start.
        if let Some(b) = &mut params.soft_bias {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let mut grad = params.zeros_like();
        model.accumulate_batch(&params, obs.view(), targets.view(), 1.0 / rows as f64, &mut grad).unwrap();
        let policy = gradient_errors(&params, &grad, |p| {
            model.accumulate_batch(p, obs.view(), targets.view(), 0.0, &mut p.zeros_like()).unwrap() / rows as f64
        });
        let (o, t, vt) = (obs.row(0), targets.row(0), Some(0.3));
        let mut grad = params.zeros_like();
        model.accumulate_gradient_with_value(&params, o, t, vt, 1.0, &mut grad).unwrap();
        let value = gradient_errors(&params, &grad, |p| model.objective(p, o, t, vt).unwrap());
        let (pg, pe, pk, len) = worst_group(&policy);
        let (vg, ve, vk, _) = worst_group(&value);
        worst = worst.max(pe).max(ve);
        skipped += pk + vk;
        checked += 2 * len;
        report.push(format!("{} {pe:.1e} ({pg}) / value {ve:.1e} ({vg})", variant.name()));
    }
    let alloc = body_transformer::graph::Allocation::from_graph(&graph);
    let mlp = MlpPolicy::new(graph.clone(), alloc, MlpBaselineConfig { d_model: 8, hidden: vec![16, 16] }).unwrap();
    let params = mlp.init(45);
    let mut grad = params.zeros_like();
    mlp.accumulate_batch(&params, obs.view(), targets.view(), 1.0 / rows as f64, &mut grad).unwrap();
    let errors = gradient_errors(&params, &grad, |p| {
        mlp.accumulate_batch(p, obs.view(), targets.view(), 0.0, &mut p.zeros_like()).unwrap() / rows as f64
    });
    let (g, e, k, len) = worst_group(&errors);
    worst = worst.max(e);
    skipped += k;
    checked += len;
    report.push(format!("mlp {e:.1e}({g})"));
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && skipped * 100 <= checked && elapsed <= Duration::from_secs(120),
        format!(
            "worst group rel err {worst:.2e}, {skipped} of {checked} coordinates at ReLU kinks, {:.1}s; {}",
            elapsed.as_secs_f64(),
            report.join(", ")
        ),
    )
}

fn degeneracies() -> Outcome {
    let mut rng = rng(5);
    let (mut hard, mut soft, mut mix) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..10u64 {
        let n = rng.random_range(2..=8);
        let complete = EmbodimentGraph::complete(n, 2, 1).unwrap();
        let obs = uniform_mat(&mut rng, 4, complete.total_obs_dim());
        let build =
            |g: &EmbodimentGraph, v| BodyTransformer::with_default_allocation(g.clone(), EncoderConfig::new(v, 3, 2, 8, 16)).unwrap();
        let vanilla = build(&complete, Variant::Vanilla);
        let params = vanilla.init_params(trial);
        let reference = vanilla.policy_forward_batch(obs.view(), &params).unwrap();
        let out = build(&complete, Variant::Hard).policy_forward_batch(obs.view(), &params).unwrap();
        hard = hard.max(max_abs_diff(&reference, &out));
        let out = build(&complete, Variant::Mix).policy_forward_batch(obs.view(), &params).unwrap();
        mix = mix.max(max_abs_diff(&reference, &out));

        let tree = random_tree(&mut rng, n);
        let obs = uniform_mat(&mut rng, 4, tree.total_obs_dim());
        let soft_model = build(&tree, Variant::Soft);
        let mut soft_params = soft_model.init_params(trial + 100);
        soft_params.soft_bias.as_mut().unwrap().fill(0.0);
        let mut vanilla_params = soft_params.clone();
        vanilla_params.soft_bias = None;
        let reference = build(&tree, Variant::Vanilla).policy_forward_batch(obs.view(), &vanilla_params).unwrap();
        let out = soft_model.policy_forward_batch(obs.view(), &soft_params).unwrap();
        soft = soft.max(max_abs_diff(&reference, &out));
    }
    outcome(
        hard <= 1e-10 && soft <= 1e-10 && mix <= 1e-10,
        format!("max abs diff hard/complete {hard:.1e}, soft/zero-bias {soft:.1e}, mix/complete {mix:.1e}"),
    )
}

fn behavior_cloning(out_dir: &Path) -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bc_chain8.toml");
    let cfg = ExperimentConfig::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let threshold = 2.0 * cfg.task.noise * cfg.task.noise;
    let start = Instant::now();
    let result = run_experiment(&cfg).unwrap();
    emit_csv(&result.runs, out_dir.join("bc_runs.csv"), &RUN_HEADER).unwrap();
    emit_csv(&result.curves, out_dir.join("bc_curves.csv"), &CURVE_HEADER).unwrap();
    println!("{}", summary_table(&result.summary));
    let hard: Vec<&RunSummary> = result.runs.iter().filter(|r| r.model == "hard").collect();
    let per_seed: Vec<String> = hard.iter().map(|r| format!("{}:{:.3e}", r.seed, r.final_val_mse)).collect();
    let hard_ok = hard.len() == 5 && hard.iter().all(|r| r.final_val_mse <= threshold);
    let table_ok = ["hard", "hard-random"].iter().all(|m| result.summary.iter().any(|s| s.model == *m));
    let means: Vec<String> = result.summary.iter().map(|s| format!("{} {:.3e}", s.model, s.mean_val_mse)).collect();
    outcome(
        hard_ok && table_ok && cfg.train.epochs <= 200,
        format!(
            "hard final val MSE per seed [{}] vs 2*sigma^2 = {threshold:.1e} after {} epochs; means {}; {:.0}s",
            per_seed.join(" "),
            cfg.train.epochs,
            means.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn bot(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_bot")).args(args).output().unwrap();
    assert!(out.status.success(), "bot {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

/// Bench CSV with the runtime columns blanked.
fn without_timings(path: &Path) -> String {
    let timed = ["runtime_ns", "preprocess_ns"].map(|c| BENCH_HEADER.iter().position(|h| h == &c).unwrap());
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            line.split(',')
                .enumerate()
                .map(|(i, f)| if timed.contains(&i) { "" } else { f })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn cli_determinism(dir: &Path) -> Outcome {
    let fixture = |f: &str| Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(f).display().to_string();
    let chain5 = fixture("chain5.json");
    let mlp_config = dir.join("mlp.toml");
    std::fs::write(
        &mlp_config,
        r#"
seeds = [3, 4]
variants = ["hard", "soft"]
[task]
graph = { chain = { len = 5, obs_dim = 2, action_dim = 1 } }
radius = 1
noise = 0.01
train_samples = 96
validation_samples = 32
[encoder]
num_layers = 2
num_heads = 2
d_model = 8
d_ff = 16
[mlp]
d_model = 8
depth = 2
[train]
learning_rate = 0.003
batch_size = 16
epochs = 3
"#,
    )
    .unwrap();
    let mut differing = Vec::new();
    let mut checked = 0;
    for run in 0..2 {
        let p = |name: &str| dir.join(format!("{run}-{name}")).display().to_string();
        let outputs: Vec<(String, String)> = vec![
            ("mask build".into(), {
                bot(&["mask", "build", "--graph", &chain5, "--out", &p("body.txt")]);
                std::fs::read_to_string(p("body.txt")).unwrap()
            }),
            ("mask random".into(), {
                bot(&["mask", "random", "--nodes", "16", "--zero-fraction", "0.7", "--seed", "9", "--out", &p("rand.txt")]);
                std::fs::read_to_string(p("rand.txt")).unwrap()
            }),
            ("flops".into(), String::from_utf8(bot(&["flops", "--nodes", "128", "--zero-fraction", "0.908"])).unwrap()),
            ("bench scaling".into(), {
                let args = ["--nodes", "16,32", "--trials", "4", "--warmup", "1", "--seed", "5", "--dk", "8"];
                bot(&[&["bench", "scaling", "--out", &p("scaling.csv")][..], &args].concat());
                without_timings(Path::new(&p("scaling.csv")))
            }),
            ("bench sparsity".into(), {
                let args = ["--nodes", "8", "--zf-min", "0", "--zf-max", "0.8", "--zf-step", "0.4", "--trials", "3"];
                bot(&[&["bench", "sparsity", "--out", &p("sweep.csv"), "--seed", "2", "--dk", "8"][..], &args].concat());
                without_timings(Path::new(&p("sweep.csv")))
            }),
            ("train".into(), {
                bot(&[
                    "train", "--graph", &chain5, "--variant", "soft", "--layers", "2", "--seeds", "0,1", "--epochs", "3",
                    "--train-samples", "64", "--val-samples", "16", "--lr", "0.003", "--out", &p("curves.csv"),
                    "--summary", &p("runs.csv"),
                ]);
                std::fs::read_to_string(p("curves.csv")).unwrap() + &std::fs::read_to_string(p("runs.csv")).unwrap()
            }),
            ("train --config".into(), {
                bot(&["train", "--config", &mlp_config.display().to_string(), "--out", &p("cfg.csv")]);
                std::fs::read_to_string(p("cfg.csv")).unwrap()
            }),
            (
                "eval receptive-field".into(),
                String::from_utf8(bot(&["eval", "receptive-field", "--graph", &chain5, "--layers", "2", "--node", "0"])).unwrap(),
            ),
        ];
        std::fs::write(dir.join(format!("outputs-{run}.json")), serde_json::to_string(&outputs).unwrap()).unwrap();
    }
    let load = |run: usize| -> Vec<(String, String)> {
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("outputs-{run}.json"))).unwrap()).unwrap()
    };
    for (a, b) in load(0).into_iter().zip(load(1)) {
        checked += 1;
        if a.1 != b.1 || a.1.is_empty() {
            differing.push(a.0);
        }
    }
    outcome(differing.is_empty() && checked == 8, format!("{checked} commands run twice; differing: {differing:?}"))
}

fn csv_roundtrip(dir: &Path) -> Outcome {
    let plan = BenchPlan { warmup: 1, d_k: 8, ..BenchPlan::new(vec![4, 9, 16], vec![0.0, 0.5], 3, 12) };
    let records = run_scaling_bench(&plan).unwrap();
    let mut bytes = Vec::new();
    write_csv(&records, &mut bytes, &BENCH_HEADER).unwrap();
    let parsed: Vec<BenchRecord> = read_csv(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_csv(&parsed, &mut again, &BENCH_HEADER).unwrap();

    let cli_file = dir.join("0-sweep.csv");
    let cli_text = std::fs::read(&cli_file).unwrap();
    let cli: Vec<BenchRecord> = read_csv(cli_text.as_slice()).unwrap();
    let mut cli_again = Vec::new();
    write_csv(&cli, &mut cli_again, &BENCH_HEADER).unwrap();

    let runs: Vec<RunSummary> = read_csv(std::fs::read(dir.join("0-runs.csv")).unwrap().as_slice()).unwrap();
    let mut runs_again = Vec::new();
    write_csv(&runs, &mut runs_again, &RUN_HEADER).unwrap();

    let pass = parsed == records && again == bytes && cli_again == cli_text && runs_again == std::fs::read(dir.join("0-runs.csv")).unwrap();
    outcome(
        pass,
        format!(
            "{} in-memory bench rows, {} CLI bench rows and {} run rows re-serialize byte for byte",
            records.len(),
            cli.len(),
            runs.len()
        ),
    )
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn main() {
    let dir = out_dir();
    let cli_dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 kernel equivalence and speedup", Box::new(kernel_equivalence)),
        ("2 FLOP model exactness", Box::new(flop_exactness)),
        ("3 receptive field", Box::new(receptive_fields)),
        ("4 gradient correctness", Box::new(gradients)),
        ("5 vanilla degeneracies", Box::new(degeneracies)),
        ("6 synthetic behavior cloning", Box::new(|| behavior_cloning(&dir))),
        ("7 CLI determinism", Box::new(|| cli_determinism(cli_dir.path()))),
        ("8 CSV round trip", Box::new(|| csv_roundtrip(cli_dir.path()))),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        let result = check();
        println!("{} criterion {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
        if !result.pass {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
