//! Command-line benchmark harness for the `ultr` toolkit.
//!
//! Exit codes: 0 on success, 1 on validation/usage errors, 2 on runtime
//! failures.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ultr::corpus::{ClickLog, JudgedDataset};
use ultr::error::Error;
use ultr::eval::{evaluate_click_nll, evaluate_ranker};
use ultr::harness::{
    compare, emit_plot_data, loss_kind_name, run_pipeline, write_atomic, ExperimentConfig,
};
use ultr::losses::LossKind;
use ultr::model::ScoringModel;
use ultr::propensity::{
    adjacent_pair, all_pairs, build_intervention_index, ctr_by_rank, pivot_rank, PropensityCurve,
};
use ultr::simulate::{generate_log, LoggingPolicy, UserModelConfig};
use ultr::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "ultr", version, about = "Counterfactual learning-to-rank benchmark harness")]
struct Cli {
    /// Override the operation seed (simulation seed for `simulate`/`run`,
    /// training seed for `train`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate PBM clicks over a judged dataset and write a JSON-Lines log.
    Simulate(SimulateArgs),
    /// Estimate a propensity curve from a click log.
    EstimatePropensity(EstimateArgs),
    /// Train a scorer on click logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a judged dataset (and optionally click NLL).
    Evaluate(EvaluateArgs),
    /// Compare finished runs against a baseline run.
    Compare(CompareArgs),
    /// Run a full pipeline: simulate/load, estimate, train, evaluate, report.
    Run(RunArgs),
    /// Write propensity curves and CTR-per-rank as long-format CSV.
    EmitPlotData(EmitArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Judged dataset in LETOR/SVMLight format.
    #[arg(long)]
    judged: PathBuf,
    /// JSON file with optional `user_model` and `policy` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of sessions to generate.
    #[arg(long)]
    sessions: usize,
    /// Drop queries with fewer documents before simulating.
    #[arg(long, default_value_t = 5)]
    min_docs: usize,
    /// Output click log (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar path (default: `<out>.truth.json`).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct SimulateConfig {
    user_model: UserModelConfig,
    policy: LoggingPolicy,
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorName {
    AdjacentPair,
    PivotRank,
    AllPairs,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, value_enum)]
    method: EstimatorName,
    /// Click log (JSON Lines).
    #[arg(long)]
    log: PathBuf,
    /// Output curve JSON.
    #[arg(long)]
    out: PathBuf,
    /// Curve length; defaults to the maximum rank in the log.
    #[arg(long)]
    k: Option<u32>,
    /// Pivot rank for the pivot-rank estimator.
    #[arg(long, default_value_t = 1)]
    pivot: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (mirrors the TrainConfig fields).
    #[arg(long)]
    config: PathBuf,
    /// Training click log.
    #[arg(long)]
    train: PathBuf,
    /// Validation click log.
    #[arg(long)]
    val: PathBuf,
    /// Propensity curve JSON to inject into IPS losses.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Checkpoint output path (a `.bin` sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint path written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Judged dataset for ranking metrics.
    #[arg(long)]
    judged: PathBuf,
    /// Click log for NLL (requires --method).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Loss kind the checkpoint was trained with, e.g. `two-tower`.
    #[arg(long)]
    method: Option<String>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline pipeline directory.
    #[arg(long)]
    baseline: PathBuf,
    /// Pipeline directories to test against the baseline.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value_t = ultr::harness::DEFAULT_ALPHA)]
    alpha: f64,
    /// Output directory for comparison.csv / comparison.md.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    /// Propensity curve JSON files.
    #[arg(long, num_args = 0..)]
    curves: Vec<PathBuf>,
    /// Click log for the CTR-per-rank series.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> ultr::Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, cli.seed),
        Command::EstimatePropensity(args) => cmd_estimate(args),
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => compare(&args.runs, &args.baseline, args.alpha, &args.out),
        Command::Run(args) => {
            let mut cfg = ExperimentConfig::read_path(&args.config)?;
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            if let (Some(seed), ultr::harness::DataSource::Simulated { sim_seed, .. }) =
                (cli.seed, &mut cfg.data)
            {
                *sim_seed = seed;
            }
            let result = run_pipeline(&cfg)?;
            println!("{}", result.out_dir.display());
            Ok(())
        }
        Command::EmitPlotData(args) => {
            let curves = args
                .curves
                .iter()
                .map(PropensityCurve::read_path)
                .collect::<ultr::Result<Vec<_>>>()?;
            let ctr = match &args.log {
                Some(path) => ctr_by_rank(&ClickLog::read_path(path)?),
                None => BTreeMap::new(),
            };
            emit_plot_data(&curves, &ctr, &args.out)
        }
    }
}

fn cmd_simulate(args: SimulateArgs, seed_override: Option<u64>) -> ultr::Result<()> {
    let cfg: SimulateConfig = match &args.config {
        Some(path) => serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?,
        None => SimulateConfig::default(),
    };
    let judged = JudgedDataset::read_path(&args.judged)?.filter_min_docs(args.min_docs);
    let seed = seed_override.unwrap_or(cfg.seed);
    let sim = generate_log(&judged, &cfg.policy, &cfg.user_model, args.sessions, seed)?;
    sim.log.write_path(&args.out)?;
    let truth_path = args.truth_out.unwrap_or_else(|| {
        let mut name = args.out.as_os_str().to_owned();
        name.push(".truth.json");
        PathBuf::from(name)
    });
    write_atomic(
        &truth_path,
        serde_json::to_string_pretty(&sim.sidecar())?.as_bytes(),
    )?;
    println!(
        "wrote {} sessions to {} (truth: {})",
        sim.log.n_sessions(),
        args.out.display(),
        truth_path.display()
    );
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> ultr::Result<()> {
    let log = ClickLog::read_path(&args.log)?;
    let idx = build_intervention_index(&log);
    let k = args.k.unwrap_or(log.n_ranks);
    let curve = match args.method {
        EstimatorName::AdjacentPair => adjacent_pair(&idx, k)?,
        EstimatorName::PivotRank => pivot_rank(&idx, k, args.pivot)?,
        EstimatorName::AllPairs => all_pairs(&idx, k)?,
    };
    curve.write_path(&args.out)?;
    println!("wrote {} ranks to {}", curve.k(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs, seed_override: Option<u64>) -> ultr::Result<()> {
    let mut cfg: TrainConfig =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(&args.config)?))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if let Some(curve_path) = &args.curve {
        cfg.loss.curve = Some(PropensityCurve::read_path(curve_path)?);
    }
    let train_log = ClickLog::read_path(&args.train)?;
    let val_log = ClickLog::read_path(&args.val)?;
    let trained = train(&train_log, &val_log, &cfg)?;
    trained.model.save(&args.out)?;
    println!(
        "stopped at epoch {} (best epoch {}, validation loss {:.6}); checkpoint: {}",
        trained.stopped_epoch,
        trained.best_epoch,
        trained.best_val_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> ultr::Result<()> {
    let model = ScoringModel::load(&args.model)?;
    let judged = JudgedDataset::read_path(&args.judged)?;
    let mut report = evaluate_ranker(&model, &judged)?;
    let method: Option<LossKind> = match &args.method {
        Some(name) => Some(
            serde_json::from_value(serde_json::Value::String(name.clone()))
                .map_err(|_| Error::Validation(format!("unknown method `{name}`")))?,
        ),
        None => None,
    };
    if let Some(log_path) = &args.log {
        let kind = method.ok_or_else(|| {
            Error::Validation("--log requires --method to pick the click-probability form".into())
        })?;
        let log = ClickLog::read_path(log_path)?;
        report.nll = evaluate_click_nll(&model, kind, &log)?;
    }
    let name = method.map_or("model", loss_kind_name);
    let nll = report.nll.map_or(String::new(), |v| format!("{v:.6}"));
    let csv = format!(
        "method,seed,dcg@1,dcg@3,dcg@5,dcg@10,mrr@10,nll,n_queries\n{name},0,{:.6},{:.6},{:.6},{:.6},{:.6},{nll},{}\n",
        report.dcg[&1], report.dcg[&3], report.dcg[&5], report.dcg[&10], report.mrr10, report.n_queries
    );
    write_atomic(&args.out, csv.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(())
}
