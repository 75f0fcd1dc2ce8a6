use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vrpmoe::analytics::{activations, write_embedding_csv};
use vrpmoe::checkpoint;
use vrpmoe::instancegen::{file_checksum, generate_dataset, read_dataset, DistributionSpec};
use vrpmoe::libio::{benchmark_gap, euc2d_tour_cost, parse_lib};
use vrpmoe::moe::{usage_histogram, write_usage_csv};
use vrpmoe::oracle::{cached_references, gap, read_external_costs};
use vrpmoe::train::{evaluate, preset, total_loss_grad_check, train_run, EvalOptions, RunOptions, TrainConfig};
use vrpmoe::{DistLabel, Error, Problem};

/// Mixture-of-experts neural solver for TSP and CVRP.
#[derive(Parser, Debug)]
#[command(name = "vrpmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a JSONL dataset of synthetic instances.
    Generate(GenerateArgs),
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset against reference costs.
    Eval(EvalArgs),
    /// Solve a TSPLIB/CVRPLIB EUC_2D file.
    Solve(SolveArgs),
    /// Export expert usage histograms and instance embeddings.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the training-loss gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Spatial family: uniform, cluster, mixed, explosion, expansion, grid, implosion.
    #[arg(long)]
    family: String,
    /// Customers per instance.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// tsp or cvrp.
    #[arg(long, default_value = "tsp")]
    problem: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path [default: <problem><n>_<family>.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config with `[policy]` and `[schedule]` tables.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: tiny, desk or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient shards evaluated in parallel [default: available cores].
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from a checkpoint written by the same config and seed.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    instances_per_epoch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    val_per_dist: Option<usize>,
    /// Comma-separated training families, e.g. `uniform` or `uniform,cluster,mixed`.
    #[arg(long, value_delimiter = ',')]
    dists: Option<Vec<String>>,
    /// Turn off the per-epoch re-weighting of training distributions.
    #[arg(long)]
    no_dwa: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// CSV `seed,cost` of reference costs.
    #[arg(long, conflicts_with = "oracle")]
    refs: Option<PathBuf>,
    /// Compute references with the built-in exact/heuristic solvers.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    no_augment: bool,
    /// Multi-start rollouts per instance, capped at n [default: n].
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long, default_value_t = 32)]
    chunk: usize,
    /// Directory for `summary.csv` and `instances.csv`.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// TSPLIB/CVRPLIB file with EUC_2D weights.
    #[arg(long)]
    lib: PathBuf,
    /// Best known integer cost for the gap report.
    #[arg(long)]
    best_known: Option<i64>,
    /// Write the result JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One or more JSONL datasets.
    #[arg(long, num_args = 1.., required = true)]
    dataset: Vec<PathBuf>,
    /// Directory for `expert_usage.csv` and `embeddings.csv`.
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Break {
    Backward,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Debug switch: corrupt a backward rule (negative control).
    #[arg(long = "break", value_enum)]
    fault: Option<Break>,
}

/// Failure with its exit code: 1 runtime, 2 usage or configuration.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Unsupported(_) | Error::Parse { .. } | Error::Json(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let family: DistLabel = a.family.parse()?;
    let problem: Problem = a.problem.parse()?;
    if family == DistLabel::External {
        return Err(usage("`external` labels parsed benchmark files and cannot be generated"));
    }
    let spec = DistributionSpec::new(family, a.n);
    spec.validate()?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("{}{}_{}.jsonl", a.problem.to_lowercase(), a.n, family)));
    let summary = generate_dataset(&spec, problem, a.count, a.seed, &out)?;
    println!("wrote {} instances to {} (sha256 {})", summary.count, out.display(), summary.checksum);
    Ok(())
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg: TrainConfig = match (&a.config, &a.preset) {
        (Some(p), None) => TrainConfig::from_toml(&std::fs::read_to_string(p)?)?,
        (None, Some(name)) => preset(name)?,
        _ => return Err(usage("pass exactly one of --config or --preset")),
    };
    let s = &mut cfg.schedule;
    if let Some(v) = a.epochs {
        s.epochs = v;
    }
    if let Some(v) = a.instances_per_epoch {
        s.instances_per_epoch = v;
    }
    if let Some(v) = a.batch {
        s.batch = v;
    }
    if let Some(v) = a.lr {
        s.lr = v;
    }
    if let Some(v) = a.val_per_dist {
        s.val_per_dist = v;
    }
    if let Some(names) = &a.dists {
        let dists = names.iter().map(|n| n.parse::<DistLabel>()).collect::<vrpmoe::Result<Vec<_>>>()?;
        let k = dists.len();
        s.dist_set = dists;
        s.sampling_probs = vec![1.0 / k as f64; k];
        s.gap_bias = vec![0.0; k];
    }
    if a.no_dwa {
        s.dwa = false;
    }
    cfg.validate()?;
    println!("{}", cfg.to_toml()?);
    let opts = RunOptions {
        out_dir: a.out.clone(),
        seed: a.seed,
        workers: a.workers.unwrap_or_else(default_workers),
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let run = train_run(&cfg, &opts)?;
    if let Some(last) = run.metrics.last() {
        println!("epoch {} gaps {:?} sampling {:?}", last.epoch, last.gaps, run.sampling_probs);
    }
    println!("{} epochs complete; outputs in {}", run.epochs_done, a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    if a.refs.is_none() && !a.oracle {
        return Err(usage("no reference source: pass --refs <seed,cost CSV> or --oracle"));
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let insts = read_dataset(&a.dataset)?;
    if insts.is_empty() {
        return Err(usage("dataset is empty"));
    }
    if let Some(i) = insts.iter().position(|i| i.problem != ck.header.policy.problem) {
        return Err(usage(format!("instance {i} is {:?} but the checkpoint solves {:?}", insts[i].problem, ck.header.policy.problem)));
    }
    let refs: Vec<f64> = match &a.refs {
        Some(path) => {
            let table = read_external_costs(path)?;
            insts
                .iter()
                .map(|i| table.get(&i.seed).copied().ok_or_else(|| usage(format!("no reference cost for seed {}", i.seed))))
                .collect::<std::result::Result<_, _>>()?
        }
        None => {
            std::fs::create_dir_all(&a.out)?;
            cached_references(&insts, &file_checksum(&a.dataset)?, Some(&a.out.join("reference_cache.csv")))?
        }
    };
    let t0 = Instant::now();
    let opts = EvalOptions { starts: a.starts.unwrap_or(usize::MAX), augment: !a.no_augment, chunk: a.chunk };
    let res = evaluate(&ck.policy.net, &ck.policy.params, &insts, opts)?;
    let seconds = t0.elapsed().as_secs_f64();
    let gaps: Vec<f64> = res.costs.iter().zip(&refs).map(|(&c, &r)| gap(c, r)).collect();
    let avg_obj = res.costs.iter().sum::<f64>() / insts.len() as f64;
    let avg_gap = gaps.iter().sum::<f64>() / insts.len() as f64;

    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("summary.csv"), format!("avg_obj,avg_gap,total_seconds\n{avg_obj},{avg_gap},{seconds}\n"))?;
    let mut rows = String::from("index,seed,dist_label,obj,ref,gap\n");
    for (i, inst) in insts.iter().enumerate() {
        rows.push_str(&format!("{i},{},{},{},{},{}\n", inst.seed, inst.dist_label, res.costs[i], refs[i], gaps[i]));
    }
    std::fs::write(a.out.join("instances.csv"), rows)?;
    println!("avg_obj,avg_gap,total_seconds");
    println!("{avg_obj:.6},{avg_gap:.6},{seconds:.3}");
    Ok(())
}

#[derive(Serialize)]
struct SolveReport {
    name: String,
    problem: Problem,
    dimension: usize,
    /// 0-based node ids in file order (CVRP: depot first).
    tour: Vec<usize>,
    cost: i64,
    best_known: Option<i64>,
    gap: Option<f64>,
    seconds: f64,
}

fn cmd_solve(a: SolveArgs) -> CliResult {
    let lib = parse_lib(&std::fs::read_to_string(&a.lib)?)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    if lib.header.problem != ck.header.policy.problem {
        return Err(usage(format!("{} is {:?} but the checkpoint solves {:?}", a.lib.display(), lib.header.problem, ck.header.policy.problem)));
    }
    let (inst, _) = lib.to_instance()?;
    let t0 = Instant::now();
    let res = evaluate(&ck.policy.net, &ck.policy.params, &[inst], EvalOptions::default())?;
    let tour = res.tours.into_iter().next().expect("one instance");
    let cost = euc2d_tour_cost(&lib.coords, &tour, true);
    let report = SolveReport {
        name: lib.header.name.clone(),
        problem: lib.header.problem,
        dimension: lib.header.dimension,
        tour,
        cost,
        best_known: a.best_known,
        gap: a.best_known.map(|b| benchmark_gap(cost, b)),
        seconds: t0.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &json)?;
    }
    println!("{json}");
    if let Some(g) = report.gap {
        println!("cost {cost}, gap {g:.6}");
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> CliResult {
    let ck = checkpoint::load(&a.checkpoint)?;
    let net = &ck.policy.net;
    let mut all = Vec::new();
    for path in &a.dataset {
        let insts = read_dataset(path)?;
        all.extend(activations(net, &ck.policy.params, &insts, 32)?);
    }
    let mut by_label: BTreeMap<DistLabel, Vec<&[usize]>> = BTreeMap::new();
    for act in &all {
        by_label.entry(act.dist_label).or_default().push(&act.selected);
    }
    let rows: Vec<(String, Vec<u64>)> = by_label
        .into_iter()
        .map(|(label, sels)| (label.to_string(), usage_histogram(sels, net.cfg.moe.m)))
        .collect();
    std::fs::create_dir_all(&a.out)?;
    write_usage_csv(&a.out.join("expert_usage.csv"), &rows)?;
    write_embedding_csv(&a.out.join("embeddings.csv"), &all)?;
    for (label, counts) in &rows {
        let total: u64 = counts.iter().sum();
        let freq: Vec<String> = counts.iter().map(|&c| format!("{:.3}", c as f64 / total.max(1) as f64)).collect();
        println!("{label}: {}", freq.join(" "));
    }
    println!("{} instances; outputs in {}", all.len(), a.out.display());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> CliResult {
    let cfg = preset(&a.preset)?;
    let t0 = Instant::now();
    let report = total_loss_grad_check(&cfg, a.seed, a.h, a.fault.is_some())?;
    for b in &report.per_block {
        println!("{:<32} {:.3e}", b.name, b.max_rel_error);
    }
    let worst = report.worst_block().map_or("-", |b| b.name.as_str());
    println!(
        "max relative error {:.3e} (worst block {worst}) over {} coordinates in {:.1}s",
        report.max_rel_error,
        report.coords_checked,
        t0.elapsed().as_secs_f64()
    );
    if report.max_rel_error <= a.tolerance {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure { code: 1, msg: format!("gradient check failed: {:.3e} > {:.0e}", report.max_rel_error, a.tolerance) })
    }
}
