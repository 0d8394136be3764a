use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcra_core::baselines::{bruteforce_allocate, equal_split_allocate, heuristic_allocate};
use mcra_core::ewmmse::{self, SolverOptions};
use mcra_core::gnn::{self, Aggregation, FeatureTransform, GnnModel, PowerHead};
use mcra_core::harness::{emit_report, ExperimentPlan, Harness, Table};
use mcra_core::rate::{is_feasible, weighted_sum_rate};
use mcra_core::trainer::{self, DualMode, OptimizerKind, TrainConfig};
use mcra_core::{read_dataset, write_dataset, Dataset, Error, NetworkConfig};

#[derive(Parser)]
#[command(name = "mcra", version, about = "Joint channel and power allocation experiments")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset of channel realizations.
    Generate(GenerateArgs),
    /// Train the message-passing allocator.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Run a classical allocator on every instance of a dataset.
    Solve(SolveArgs),
    /// Run an experiment plan and write its report.
    Bench(BenchArgs),
    /// Combine CSV tables into a markdown report.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of transceiver pairs.
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// Number of channels.
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dataset.mcra")]
    out: PathBuf,
    /// Side of the square deployment area in meters.
    #[arg(long, default_value_t = 100.0)]
    area: f64,
    /// Shortest transmitter-receiver distance in meters.
    #[arg(long, default_value_t = 2.0)]
    dmin: f64,
    /// Longest transmitter-receiver distance in meters.
    #[arg(long, default_value_t = 10.0)]
    dmax: f64,
    /// Path-loss exponent.
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    /// Receiver noise power in watts.
    #[arg(long, default_value_t = 1e-4)]
    noise: f64,
    /// Per-transmitter power budget in watts.
    #[arg(long, default_value_t = 1.0)]
    pmax: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DualArg {
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Max,
    Sum,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeaturesArg {
    /// Standardized log10 gains.
    Log,
    /// Gain magnitudes as they are.
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    /// Scale rows above the budget back onto it.
    Normalize,
    /// Cap every channel at P_max / M.
    ChannelCap,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; the training set is used when omitted.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint path; the training log is written next to it.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Primal step size.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Dual step size.
    #[arg(long, default_value_t = 1e-3)]
    lambda_lr: f64,
    /// Message-passing rounds.
    #[arg(long, default_value_t = gnn::DEFAULT_ROUNDS)]
    rounds: usize,
    /// Powers that enter the budget term of the loss.
    #[arg(long, value_enum, default_value_t = DualArg::Pre)]
    dual_on: DualArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AggregationArg::Max)]
    aggregation: AggregationArg,
    #[arg(long, value_enum, default_value_t = FeaturesArg::Log)]
    features: FeaturesArg,
    #[arg(long, value_enum, default_value_t = HeadArg::Normalize)]
    head: HeadArg,
    /// Validate every this many epochs.
    #[arg(long, default_value_t = 1)]
    val_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-instance CSV.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Ewmmse,
    Heuristic,
    Equal,
    Icp,
    Bruteforce,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    algo: AlgoArg,
    #[arg(long)]
    data: PathBuf,
    /// Per-instance CSV.
    #[arg(long, default_value = "solve.csv")]
    out: PathBuf,
    /// Power levels per (pair, channel) for the grid search.
    #[arg(long, default_value_t = 21)]
    grid_levels: usize,
    /// Model whose outputs feed the per-channel cap (required for icp).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Iteration cap for ewmmse.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Relative objective tolerance for ewmmse.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Output directory; overrides the plan's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Timing repetitions per instance.
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// CSV tables to include, in order.
    #[arg(long, num_args = 0..)]
    inputs: Vec<PathBuf>,
    /// Output directory for report.md and the CSV copies.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

/// A failure plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            Error::Plan(_) => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn generate(a: GenerateArgs) -> CmdResult {
    let mut cfg = NetworkConfig::new(a.d, a.m).with_seed(a.seed);
    cfg.area_side = a.area;
    cfg.d_min = a.dmin;
    cfg.d_max = a.dmax;
    cfg.gamma = a.gamma;
    cfg.noise_power = a.noise;
    cfg.p_max = a.pmax;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = Dataset::generate(cfg, a.samples)?;
    write_dataset(&data, &a.out)?;
    println!(
        "wrote {} samples to {} (sha256 {})",
        data.len(),
        a.out.display(),
        data.content_hash()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let train_set = read_dataset(&a.data)?;
    let val_set = match &a.val {
        Some(p) => read_dataset(p)?,
        None => train_set.clone(),
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        dual_lr: a.lambda_lr,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        },
        dual_mode: match a.dual_on {
            DualArg::Pre => DualMode::Pre,
            DualArg::Post => DualMode::Post,
        },
        seed: a.seed,
        val_every: a.val_every,
    };
    let head = match a.head {
        HeadArg::Normalize => PowerHead::Normalize,
        HeadArg::ChannelCap => PowerHead::ChannelCap,
    };
    let init = trainer::init_model(&train_set, &tc, head)
        .with_rounds(a.rounds)
        .with_aggregation(match a.aggregation {
            AggregationArg::Max => Aggregation::Max,
            AggregationArg::Sum => Aggregation::Sum,
            AggregationArg::Mean => Aggregation::Mean,
        })
        .with_transform(match a.features {
            FeaturesArg::Log => FeatureTransform::LogStandardize,
            FeaturesArg::Raw => FeatureTransform::Raw,
        });
    let (model, log) = trainer::train(&train_set, &val_set, init, &tc)?;
    gnn::save_model(&model, &a.out)?;
    let log_path = a.out.with_extension("trainlog.csv");
    write_file(&log_path, &log.to_csv())?;
    let best = log
        .epochs
        .iter()
        .find(|e| e.epoch == log.best_epoch)
        .map_or(log.initial_val_sum_rate, |e| e.val_sum_rate);
    println!(
        "best epoch {} with validation sum rate {best:.4}; model {} log {}",
        log.best_epoch,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let model = gnn::load_model(&a.model)?;
    let data = read_dataset(&a.data)?;
    let report = trainer::evaluate(&model, &data)?;
    write_file(&a.out, &report.rows_csv())?;
    println!(
        "mean sum rate {:.6} (std {:.6}), violations {}, wall time per instance {:.3e} s",
        report.mean_sum_rate, report.std_sum_rate, report.violations, report.mean_wall_time_s
    );
    Ok(())
}

fn solve(a: SolveArgs) -> CmdResult {
    if a.algo == AlgoArg::Icp && a.model.is_none() {
        return Err(usage("--algo icp needs --model"));
    }
    let data = read_dataset(&a.data)?;
    let cfg = &data.config;
    let icp_model: Option<GnnModel> = match &a.model {
        Some(p) if a.algo == AlgoArg::Icp => Some(gnn::load_model(p)?.with_head(PowerHead::ChannelCap)),
        _ => None,
    };
    let opts = SolverOptions {
        max_iters: a.max_iters,
        rel_tol: a.tol,
        ..SolverOptions::default()
    };
    let mut rows = Vec::with_capacity(data.len());
    let mut total = 0.0;
    let mut violations = 0;
    for (index, inst) in data.samples.iter().enumerate() {
        let started = Instant::now();
        let (alloc, iterations) = match a.algo {
            AlgoArg::Ewmmse => {
                let out = ewmmse::solve(inst, cfg, &opts)?;
                (out.allocation, out.iterations.to_string())
            }
            AlgoArg::Heuristic => (heuristic_allocate(inst, cfg)?, String::new()),
            AlgoArg::Equal => (equal_split_allocate(inst, cfg)?, String::new()),
            AlgoArg::Icp => (icp_model.as_ref().expect("checked above").infer(inst)?, String::new()),
            AlgoArg::Bruteforce => (bruteforce_allocate(inst, cfg, a.grid_levels)?.0, String::new()),
        };
        let wall = started.elapsed().as_secs_f64();
        let rate = weighted_sum_rate(inst, &alloc.power, cfg);
        let feasible = is_feasible(&alloc.power, cfg.p_max);
        total += rate;
        violations += usize::from(!feasible);
        rows.push(vec![
            index.to_string(),
            rate.to_string(),
            iterations,
            feasible.to_string(),
            format!("{wall:.9}"),
        ]);
    }
    let table = Table::new(
        "solve",
        "Per-instance results",
        &["index", "sum_rate", "iterations", "feasible", "wall_time_s"],
        rows,
    );
    write_file(&a.out, &table.to_csv()?)?;
    println!(
        "mean sum rate {:.6} over {} instances, violations {violations}",
        total / data.len().max(1) as f64,
        data.len()
    );
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let mut plan = ExperimentPlan::load(&a.plan)?;
    if let Some(out) = a.out {
        plan.output_dir = out;
    }
    fs::create_dir_all(&plan.output_dir).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", plan.output_dir.display()),
    })?;
    let mut harness = Harness::new(&plan)?;
    let sumrate = harness.sumrate()?;
    let mut tables = vec![sumrate.to_table(), sumrate.wall_time_table()];
    if plan.generalization.is_some() {
        tables.push(harness.generalization()?.to_table());
    }
    if plan.timing.is_some() {
        tables.push(harness.timing(a.reps)?.to_table());
    }
    emit_report(&tables, &plan.output_dir)?;
    println!("report written to {}", plan.output_dir.join("report.md").display());
    Ok(())
}

fn report(a: ReportArgs) -> CmdResult {
    let tables = a.inputs.iter().map(Table::read_csv).collect::<Result<Vec<_>, _>>()?;
    emit_report(&tables, &a.out)?;
    println!("report written to {}", a.out.join("report.md").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Solve(a) => solve(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
