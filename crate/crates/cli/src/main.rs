//! Reproducible command-line driver: dataset generation, training, cost
//! analysis, constraint checking, design search, and latency benchmarks.
//!
//! Exit codes: 0 success/feasible, 1 infeasible verdict, 2 usage/I-O/parse
//! errors, 3 numeric divergence.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use condenser_forge_core::constraints::{validate_constraints, DEFAULT_BUDGET_FLOPS};
use condenser_forge_core::cost::{cost_with_convention, DEFAULT_FLOPS_PER_MAC};
use condenser_forge_core::data::{generate_dataset, read_dataset, split, write_dataset, GenConfig, Label};
use condenser_forge_core::dsl::{parse_arch, ArchSpec};
use condenser_forge_core::error::{Error, Result};
use condenser_forge_core::explore::{explore, netscore, SearchConfig};
use condenser_forge_core::graph::{compile, Graph};
use condenser_forge_core::rng::derive_seed;
use condenser_forge_core::train::{bench_latency, evaluate, train, TrainConfig};
use condenser_forge_core::weights_io::{load_weights, save_weights};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "condenser-forge", version, about = "Compact attention-condenser defect-detection toolkit")]
struct Cli {
    /// Machine-readable JSON on stdout instead of human text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic light-guide-plate dataset.
    GenData(GenDataArgs),
    /// Train an architecture on a generated dataset and report metrics.
    Train(TrainArgs),
    /// Print exact parameter and FLOP counts for an architecture.
    Cost(ArchCheckArgs),
    /// Check the constraint indicator and print the verdict with violations.
    Validate(ArchCheckArgs),
    /// Run the constrained evolutionary design search.
    Search(SearchArgs),
    /// Measure forward latency of an architecture with trained weights.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for PGM images and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 822)]
    count: usize,
    #[arg(long = "defect-frac", default_value_t = 422.0 / 822.0)]
    defect_frac: f64,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture file in the DSL text format.
    #[arg(long)]
    arch: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long = "weight-decay", default_value_t = 1e-3)]
    weight_decay: f64,
    /// Final epochs run at momentum 0.
    #[arg(long = "cooldown-epochs", default_value_t = 20)]
    cooldown_epochs: usize,
    #[arg(long = "lambda-d", default_value_t = 0.1)]
    lambda_d: f64,
    /// Stratified fraction of the dataset used for training; the rest is the
    /// held-out test side.
    #[arg(long = "train-frac", default_value_t = 0.25)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weights output path (.ldnw).
    #[arg(long)]
    out: PathBuf,
    /// Metrics report output path (.json); a .csv mirror is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ArchCheckArgs {
    #[arg(long)]
    arch: PathBuf,
    /// Override the architecture's input extent, as CxHxW.
    #[arg(long, value_parser = parse_chw)]
    input: Option<(usize, usize, usize)>,
    #[arg(long, default_value_t = DEFAULT_BUDGET_FLOPS)]
    budget: u64,
    /// FLOPs counted per multiply-accumulate (1 or 2).
    #[arg(long = "flops-per-mac", default_value_t = DEFAULT_FLOPS_PER_MAC, value_parser = clap::value_parser!(u64).range(1..=2))]
    flops_per_mac: u64,
}

#[derive(Args)]
struct SearchArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    pop: usize,
    #[arg(long, default_value_t = 2)]
    elite: usize,
    #[arg(long = "proxy-epochs", default_value_t = 3)]
    proxy_epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET_FLOPS)]
    budget: u64,
    #[arg(long = "train-frac", default_value_t = 0.25)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines candidate log; the best spec is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    arch: PathBuf,
    /// Weights file written by train.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 10)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err))
        }
    }
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// `CONDENSER_FORGE_THREADS` caps worker threads; the executor is serial, so
/// the cap is recorded in manifests and otherwise trivially honored.
fn thread_cap() -> Result<usize> {
    match std::env::var("CONDENSER_FORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| if n == 0 { 1 } else { n })
            .map_err(|_| Error::Config(format!("CONDENSER_FORGE_THREADS must be an integer, got `{v}`"))),
    }
}

fn run(cli: Cli) -> Result<u8> {
    let threads = thread_cap()?;
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a, cli.json, threads),
        Cmd::Train(a) => cmd_train(a, cli.json, threads),
        Cmd::Cost(a) => cmd_cost(a, cli.json),
        Cmd::Validate(a) => cmd_validate(a, cli.json),
        Cmd::Search(a) => cmd_search(a, cli.json, threads),
        Cmd::Bench(a) => cmd_bench(a, cli.json),
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let mut it = s.split('x');
    let h = it.next().and_then(|t| t.parse().ok());
    let w = it.next().and_then(|t| t.parse().ok());
    match (h, w, it.next()) {
        (Some(h), Some(w), None) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(format!("expected HxW, got `{s}`")),
    }
}

fn parse_chw(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<Option<usize>> = s.split('x').map(|t| t.parse().ok()).collect();
    match parts[..] {
        [Some(c), Some(h), Some(w)] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(format!("expected CxHxW, got `{s}`")),
    }
}

fn read_arch(path: &Path) -> Result<ArchSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read `{}`: {e}", path.display())))?;
    parse_arch(&text)
}

fn cmd_gen_data(a: GenDataArgs, json: bool, threads: usize) -> Result<u8> {
    let cfg = GenConfig {
        count: a.count,
        defect_fraction: a.defect_frac,
        height: a.size.0,
        width: a.size.1,
        seed: a.seed,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg)?;
    write_dataset(&ds, &a.out)?;
    let defective = ds.samples.iter().filter(|s| s.label == Label::Defective).count();

    let mut man = RunManifest::new("gen-data", a.seed, threads, serde_json::to_value(&cfg).expect("config serializes"));
    man.push_output_dir_files(&a.out)?;
    let man_path = a.out.join("run_manifest.json");
    man.write(&man_path)?;

    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "command": "gen-data",
                "samples": ds.samples.len(),
                "defective": defective,
                "out": a.out,
                "run_manifest": man_path,
            }))
            .expect("summary serializes")
        );
    } else {
        println!("wrote {} samples ({} defective) to {}", ds.samples.len(), defective, a.out.display());
        println!("run manifest: {}", man_path.display());
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs, json: bool, threads: usize) -> Result<u8> {
    let spec = read_arch(&a.arch)?;
    let ds = read_dataset(&a.data)?;
    let (train_set, test_set) = split(&ds.samples, a.train_frac)?;

    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        cooldown_epochs: a.cooldown_epochs,
        lambda_d: a.lambda_d,
        seed: derive_seed(a.seed, "train"),
    };
    let mut graph: Graph<f32> = compile(&spec, derive_seed(a.seed, "compile"))?;
    let history = train(&mut graph, &train_set, &cfg)?;
    let metrics = evaluate(&graph, &test_set)?;
    save_weights(&graph, &a.out)?;

    let report = cost_with_convention(&spec, DEFAULT_FLOPS_PER_MAC)?;
    let score = netscore(metrics.accuracy_pct, report.params_m(), report.flops_m(), 2.0, 0.5, 0.5).ok();
    let final_train_acc = history.last().map(|e| e.train_accuracy_pct);

    let report_json = json!({
        "command": "train",
        "arch": a.arch,
        "data": a.data,
        "train_samples": train_set.len(),
        "test_samples": test_set.len(),
        "config": {
            "epochs": a.epochs,
            "batch": a.batch,
            "lr": a.lr,
            "momentum": a.momentum,
            "weight_decay": a.weight_decay,
            "cooldown_epochs": a.cooldown_epochs,
            "lambda_d": a.lambda_d,
            "train_frac": a.train_frac,
            "seed": a.seed,
        },
        "final_train_accuracy_pct": final_train_acc,
        "test": metrics,
        "accuracy_pct": metrics.accuracy_pct,
        "params": report.params,
        "flops": report.flops,
        "params_m": report.params_m(),
        "flops_m": report.flops_m(),
        "flops_per_mac": DEFAULT_FLOPS_PER_MAC,
        "netscore": score,
        "epoch_history": history,
    });
    fs::write(&a.report, serde_json::to_string_pretty(&report_json).expect("report serializes"))?;

    // CSV mirror of the report's headline columns; latency is bench's job and
    // stays empty here.
    let csv_path = a.report.with_extension("csv");
    let csv = format!(
        "arch,accuracy_pct,params_M,flops_M,netscore,median_ms_per_sample\n{},{:.4},{:.6},{:.6},{},\n",
        a.arch.display(),
        metrics.accuracy_pct,
        report.params_m(),
        report.flops_m(),
        score.map(|s| format!("{s:.4}")).unwrap_or_default(),
    );
    fs::write(&csv_path, csv)?;

    let mut man = RunManifest::new(
        "train",
        a.seed,
        threads,
        report_json.get("config").cloned().expect("config block present"),
    );
    man.push_input_file(&a.arch)?;
    man.push_input_dir(&a.data)?;
    man.push_output_file(&a.out)?;
    man.push_output_file(&a.report)?;
    man.push_output_file(&csv_path)?;
    let man_path = a.report.with_extension("run.json");
    man.write(&man_path)?;

    if json {
        println!("{}", serde_json::to_string_pretty(&report_json).expect("report serializes"));
    } else {
        match final_train_acc {
            Some(acc) => println!("trained {} epochs, final train accuracy {acc:.1}%", a.epochs),
            None => println!("trained 0 epochs (weights left at initialization)"),
        }
        println!("test accuracy {:.2}% over {} samples", metrics.accuracy_pct, metrics.evaluated);
        println!(
            "params {} ({:.4} M), flops {} ({:.3} M) at {} flops per MAC",
            report.params,
            report.params_m(),
            report.flops,
            report.flops_m(),
            DEFAULT_FLOPS_PER_MAC
        );
        match score {
            Some(s) => println!("netscore {s:.4}"),
            None => println!("netscore undefined at this accuracy"),
        }
        println!("weights: {}", a.out.display());
        println!("report: {} (+ csv mirror)", a.report.display());
        println!("run manifest: {}", man_path.display());
    }
    Ok(0)
}

fn checked_spec(a: &ArchCheckArgs) -> Result<ArchSpec> {
    let mut spec = read_arch(&a.arch)?;
    if let Some(input) = a.input {
        spec.input = input;
    }
    Ok(spec)
}

fn cmd_cost(a: ArchCheckArgs, json: bool) -> Result<u8> {
    let spec = checked_spec(&a)?;
    let report = cost_with_convention(&spec, a.flops_per_mac)?;
    let verdict = validate_constraints(&spec, a.budget)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "command": "cost",
                "arch": a.arch,
                "input": spec.input,
                "params": report.params,
                "flops": report.flops,
                "params_m": report.params_m(),
                "flops_m": report.flops_m(),
                "flops_per_mac": a.flops_per_mac,
                "per_node": report.per_node,
                "feasible": verdict.feasible,
            }))
            .expect("summary serializes")
        );
    } else {
        println!("params {} ({:.4} M)", report.params, report.params_m());
        println!("flops {} ({:.3} M) at {} flops per MAC", report.flops, report.flops_m(), a.flops_per_mac);
        println!("feasible {} (budget {})", verdict.feasible, a.budget);
    }
    Ok(if verdict.feasible { 0 } else { 1 })
}

fn cmd_validate(a: ArchCheckArgs, json: bool) -> Result<u8> {
    let spec = checked_spec(&a)?;
    let verdict = validate_constraints(&spec, a.budget)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "command": "validate",
                "arch": a.arch,
                "input": spec.input,
                "verdict": verdict,
            }))
            .expect("summary serializes")
        );
    } else {
        println!(
            "indicator {} ({} at budget {})",
            if verdict.feasible { 1 } else { 0 },
            if verdict.feasible { "feasible" } else { "infeasible" },
            verdict.budget_flops
        );
        for v in &verdict.violations {
            match &v.node {
                Some(node) => println!("{} node={}: {}", v.code, node, v.message),
                None => println!("{}: {}", v.code, v.message),
            }
        }
    }
    Ok(if verdict.feasible { 0 } else { 1 })
}

fn cmd_search(a: SearchArgs, json: bool, threads: usize) -> Result<u8> {
    let ds = read_dataset(&a.data)?;
    let (train_set, test_set) = split(&ds.samples, a.train_frac)?;
    let cfg = SearchConfig {
        seeds: vec![a.seed],
        budget_flops: a.budget,
        iterations: a.iters,
        population: a.pop,
        elite: a.elite,
        proxy_epochs: a.proxy_epochs,
        ..SearchConfig::default()
    };
    let ranked = explore(&cfg, &train_set, &test_set)?;

    // Log in evaluation order with a running best, one JSON object per line.
    let mut by_iteration = ranked.clone();
    by_iteration.sort_by(|x, y| x.iteration.cmp(&y.iteration).then(x.spec_text.cmp(&y.spec_text)));
    let mut best_so_far: Option<f64> = None;
    let mut log = String::new();
    for c in &by_iteration {
        if let Some(u) = c.u_value {
            best_so_far = Some(best_so_far.map_or(u, |b: f64| b.max(u)));
        }
        let mut line = serde_json::to_value(c).expect("candidate serializes");
        line.as_object_mut()
            .expect("candidate is an object")
            .insert("best_so_far_u".into(), serde_json::to_value(best_so_far).expect("f64 serializes"));
        log.push_str(&serde_json::to_string(&line).expect("line serializes"));
        log.push('\n');
    }
    fs::write(&a.report, log)?;

    let best = ranked.first().ok_or_else(|| Error::Config("search produced no candidates".into()))?;
    let best_path = a.report.with_extension("best.arch");
    fs::write(&best_path, &best.spec_text)?;

    let mut man = RunManifest::new(
        "search",
        a.seed,
        threads,
        json!({
            "iters": a.iters, "pop": a.pop, "elite": a.elite,
            "proxy_epochs": a.proxy_epochs, "budget": a.budget,
            "train_frac": a.train_frac, "seed": a.seed,
        }),
    );
    man.push_input_dir(&a.data)?;
    man.push_output_file(&a.report)?;
    man.push_output_file(&best_path)?;
    let man_path = a.report.with_extension("run.json");
    man.write(&man_path)?;

    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "command": "search",
                "evaluated": ranked.len(),
                "best_spec": best_path,
                "best_u": best.u_value,
                "best_params": best.params,
                "best_flops": best.flops,
                "log": a.report,
                "run_manifest": man_path,
            }))
            .expect("summary serializes")
        );
    } else {
        println!("evaluated {} candidates over {} iterations", ranked.len(), a.iters);
        match best.u_value {
            Some(u) => println!("best U {u:.4} ({} params, {} flops)", best.params, best.flops),
            None => println!("no candidate earned a U value (best by structure only)"),
        }
        println!("best spec: {}", best_path.display());
        println!("log: {}", a.report.display());
        println!("run manifest: {}", man_path.display());
    }
    Ok(0)
}

fn cmd_bench(a: BenchArgs, json: bool) -> Result<u8> {
    let spec = read_arch(&a.arch)?;
    let mut graph: Graph<f32> = compile(&spec, 0)?;
    load_weights(&mut graph, &a.weights)?;
    let report = bench_latency(&graph, a.batch, a.warmup, a.reps)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!(
            "median {:.3} ms/sample, p90 {:.3} ms/sample (batch {}, {} reps after {} warmup)",
            report.median_ms_per_sample, report.p90_ms_per_sample, report.batch_size, report.reps, report.warmup
        );
        println!("env: {}", report.env);
    }
    Ok(0)
}
