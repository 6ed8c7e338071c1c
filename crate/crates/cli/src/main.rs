mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::io::{InputError, InputKind};

/// Certifiably optimal sparse precision-matrix estimation.
///
/// All indices in input and output files are 0-based.
#[derive(Parser, Debug)]
#[command(name = "cardprec", version)]
struct Cli {
    /// Worker threads (1 gives reproducible output).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the cardinality-constrained problem for one budget or a path of budgets.
    Estimate(EstimateArgs),
    /// Grid search over budgets and regularization multipliers.
    Tune(TuneArgs),
    /// Synthetic recovery experiment.
    Bench(BenchArgs),
    /// Covariance selection on a fixed support.
    Covsel(CovselArgs),
    /// Entrywise bounds on optimal precision entries and the implied big-M values.
    Bounds(BoundsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RegArg {
    Bigm,
    Ridge,
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    /// CSV file: samples (rows) or a p x p covariance.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "covariance")]
    input_kind: InputKind,
}

#[derive(Args, Debug, Clone)]
struct RegArgs {
    #[arg(long, value_enum, default_value = "bigm")]
    reg: RegArg,
    /// Absolute M or gamma.
    #[arg(long, conflicts_with = "reg_mult")]
    reg_value: Option<f64>,
    /// Multiple of the base scale (p/||S||_1 for big-M, 4p/||S||_2^2 for ridge).
    #[arg(long)]
    reg_mult: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct SolveArgs {
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 300.0)]
    time_limit_s: f64,
    /// Stop after this many branch-and-bound nodes (reproducible alternative to a time limit).
    #[arg(long)]
    node_limit: Option<usize>,
    /// Warm start: mb, none, or file:PATH with an i,j pair list.
    #[arg(long, default_value = "mb")]
    warm: String,
    /// Rebuild the search tree after every cut instead of adding cuts lazily.
    #[arg(long)]
    multi_tree: bool,
    /// Disable the swap local search around incumbents.
    #[arg(long)]
    no_local_search: bool,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    reg: RegArgs,
    #[command(flatten)]
    solve: SolveArgs,
    #[arg(long, conflicts_with = "k_list", required_unless_present = "k_list")]
    k: Option<usize>,
    /// Comma-separated strictly decreasing budgets; cuts are reused along the path.
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    /// JSON file with structural constraints.
    #[arg(long)]
    structure: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write solver events to stderr as JSON lines.
    #[arg(long)]
    trace: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CriterionArg {
    Ebic,
    Holdout,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Validation covariance (covariance input); sample input is split 2:1 instead.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Training sample count, needed for EBIC with covariance input.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value = "bigm")]
    reg: RegArg,
    #[arg(long, value_enum, default_value = "holdout")]
    criterion: CriterionArg,
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    reg_mults: Option<Vec<f64>>,
    #[command(flatten)]
    solve: SolveArgs,
    /// Chosen-model JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid CSV (defaults to the JSON path with a `.grid.csv` suffix, or stdout).
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Bigm,
    Ridge,
    Mb,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    p: usize,
    /// Training samples (defaults to p).
    #[arg(long)]
    n: Option<usize>,
    /// Fraction of pairs in the true graph.
    #[arg(long)]
    t: f64,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "bigm,mb")]
    methods: Vec<MethodArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "holdout")]
    criteria: Vec<CriterionArg>,
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    reg_mults: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Per-solve time limit.
    #[arg(long, default_value_t = 10.0)]
    time_limit_s: f64,
    #[arg(long)]
    node_limit: Option<usize>,
    /// Results CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON (defaults to the CSV path with a `.summary.json` suffix).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CovselArgs {
    #[command(flatten)]
    input: InputArgs,
    /// CSV list of i,j pairs.
    #[arg(long)]
    support: Option<PathBuf>,
    #[command(flatten)]
    reg: RegArgs,
    #[arg(long, default_value_t = 1e-4)]
    gap_tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Objective level; defaults to a greedy feasible point at --k.
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1e-12)]
    newton_tol: f64,
    #[arg(long, default_value_t = 1.1)]
    inflation: f64,
    /// Add a diagonal shift to a singular covariance (value optional); bounds become heuristic.
    #[arg(long, num_args = 0..=1, default_missing_value = "auto")]
    shift: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let outcome = match cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Tune(a) => commands::tune(a),
        Command::Bench(a) => commands::bench(a),
        Command::Covsel(a) => commands::covsel(a),
        Command::Bounds(a) => commands::bounds(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<InputError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<cardprec::Error>() {
        Some(cardprec::Error::Infeasible) => 3,
        Some(cardprec::Error::InvalidInput(_))
        | Some(cardprec::Error::NotPositiveDefinite { .. }) => 2,
        _ => 1,
    }
}
