//! Command line for the structure-learning pipeline: simulate worlds,
//! train the two networks, run inference, and benchmark models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 training or
//! simulation failure, 4 I/O or compatibility error. All randomness flows
//! from `--seed` through named substreams, so every command is
//! deterministic under a fixed seed. The environment variable
//! `BAM_PRECISION` (`f32` or `f64`) overrides the configured float width.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use bam::cpdagnet::{
    estimate_cpdag, init_vstructure_params, train_vstructure, CpdagNetError, VStructureEpoch,
};
use bam::eval::{run_benchmark, BenchmarkGrid, BenchmarkModel, Stage2Model};
use bam::formats::{
    read_data_csv, read_run_config, write_cpdag_json, write_data_csv, write_graph_json,
    write_immorality_csv, write_labels_json, write_prediction_json, write_trace_csv, FormatError,
    RunConfig,
};
use bam::graphs::derive_three_class_labels;
use bam::graphs::sample_er_dag;
use bam::net::Precision;
use bam::rng::substream;
use bam::semgen::{generate_test_data, standardize_columns, TestDependency};
use bam::train::{
    checkpoint_load_for_model, checkpoint_load_matching, checkpoint_save, continue_training,
    train_on_the_fly, EpochStats, TrainError,
};

const EXIT_USAGE: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_IO: u8 = 4;

/// A command failure carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn training(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_TRAINING,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "bam",
    version,
    about = "Supervised graph structure learning with bilinear attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a random world: graph JSON, labels JSON, and a data CSV.
    Simulate(SimulateArgs),
    /// Train the edge classifier or the orientation network.
    Train(TrainArgs),
    /// Run trained models on a data CSV.
    Infer(InferArgs),
    /// Benchmark trained models over a simulation grid.
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

fn create_file(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::io(format!("{}: {e}", parent.display())))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn open_file(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn format_error(path: &Path, error: FormatError) -> Failure {
    Failure::io(format!("{}: {error}", path.display()))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let reader = open_file(path)?;
            read_run_config(reader).map_err(|e| format_error(path, e))
        }
    }
}

/// The float width to run at: `BAM_PRECISION` wins over the configured one.
fn effective_precision(configured: Precision) -> Result<Precision, Failure> {
    match std::env::var("BAM_PRECISION") {
        Ok(raw) => raw
            .parse::<Precision>()
            .map_err(|e| Failure::usage(format!("BAM_PRECISION: {e}"))),
        Err(std::env::VarError::NotPresent) => Ok(configured),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Failure::usage("BAM_PRECISION is not valid UTF-8"))
        }
    }
}

fn train_failure(error: TrainError) -> Failure {
    match &error {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
            Failure::training(error.to_string())
        }
        TrainError::Data(_) => Failure::training(error.to_string()),
        TrainError::InvalidConfig(_) => Failure::usage(error.to_string()),
        _ => Failure::io(error.to_string()),
    }
}

fn print_epoch(stats: &EpochStats) {
    println!(
        "epoch {}: total {:.6} binary {:.6} categorical {:.6} penalty {:.6}",
        stats.epoch,
        stats.loss.total,
        stats.loss.binary,
        stats.loss.categorical,
        stats.loss.penalty
    );
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or(path.as_os_str());
    let mut name = stem.to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimulateArgs {
    /// Number of variables.
    #[arg(long)]
    d: usize,
    /// Expected degree of the random graph; must be below --d.
    #[arg(long)]
    q: usize,
    /// Number of samples.
    #[arg(long)]
    m: usize,
    /// Dependency family for non-source columns.
    #[arg(long, default_value = "chebyshev")]
    dependency: TestDependency,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving data.csv, graph.json, labels.json.
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    if args.d < 2 {
        return Err(Failure::usage(format!(
            "--d must be at least 2, got {}",
            args.d
        )));
    }
    if args.q == 0 || args.q >= args.d {
        return Err(Failure::usage(format!(
            "--q must satisfy 1 <= q < d; got q={} with d={}",
            args.q, args.d
        )));
    }
    if args.m < 2 {
        return Err(Failure::usage(format!(
            "--m must be at least 2, got {}",
            args.m
        )));
    }

    let mut graph_rng = substream(args.seed, "simulate/graph");
    let mut data_rng = substream(args.seed, "simulate/data");
    let graph =
        sample_er_dag(args.d, args.q, &mut graph_rng).map_err(|e| Failure::usage(e.to_string()))?;
    let labels = derive_three_class_labels(&graph);
    let data = generate_test_data(&graph, args.dependency, args.m, &mut data_rng)
        .map_err(|e| Failure::training(format!("simulation failed: {e}")))?;

    fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::io(format!("{}: {e}", args.out_dir.display())))?;
    let data_path = args.out_dir.join("data.csv");
    let graph_path = args.out_dir.join("graph.json");
    let labels_path = args.out_dir.join("labels.json");
    write_data_csv(&data, create_file(&data_path)?).map_err(|e| format_error(&data_path, e))?;
    write_graph_json(&graph, create_file(&graph_path)?)
        .map_err(|e| format_error(&graph_path, e))?;
    write_labels_json(&labels, create_file(&labels_path)?)
        .map_err(|e| format_error(&labels_path, e))?;
    println!(
        "wrote {} ({}x{}), {}, {}",
        data_path.display(),
        args.m,
        args.d,
        graph_path.display(),
        labels_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainStage {
    /// The three-class edge classifier.
    Edges,
    /// The v-structure orientation network.
    Cpdag,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; unmentioned fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Which network to train.
    #[arg(long, value_enum, default_value_t = TrainStage::Edges)]
    stage: TrainStage,
    /// Trace CSV path (default: the checkpoint path with `.trace.csv`).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Resume from an existing checkpoint (stage `edges` only).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epoch number this run starts at (pairs with --resume).
    #[arg(long, default_value_t = 0)]
    start_epoch: usize,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the configured samples per epoch (stage `edges`).
    #[arg(long)]
    samples_per_epoch: Option<usize>,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut config = load_run_config(args.config.as_deref())?;
    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".trace.csv"));

    match args.stage {
        TrainStage::Edges => {
            if let Some(epochs) = args.epochs {
                config.train.epochs = epochs;
            }
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            if let Some(lr) = args.lr {
                config.train.initial_lr = lr;
            }
            if let Some(samples) = args.samples_per_epoch {
                config.train.samples_per_epoch = samples;
            }
            config
                .train
                .validate()
                .map_err(|e| Failure::usage(e.to_string()))?;
            let precision = effective_precision(config.train.model.precision)?;
            match precision {
                Precision::F32 => train_edges::<f32>(&args, &config, &trace_path),
                Precision::F64 => train_edges::<f64>(&args, &config, &trace_path),
            }
        }
        TrainStage::Cpdag => {
            if args.resume.is_some() {
                return Err(Failure::usage(
                    "--resume is only supported with --stage edges",
                ));
            }
            if let Some(epochs) = args.epochs {
                config.vstructure.epochs = epochs;
            }
            if let Some(seed) = args.seed {
                config.vstructure.seed = seed;
            }
            if let Some(lr) = args.lr {
                config.vstructure.initial_lr = lr;
            }
            config
                .vstructure
                .validate()
                .map_err(|e| Failure::usage(e.to_string()))?;
            let precision = effective_precision(config.vstructure.model.precision)?;
            match precision {
                Precision::F32 => train_orientations::<f32>(&args, &config, &trace_path),
                Precision::F64 => train_orientations::<f64>(&args, &config, &trace_path),
            }
        }
    }
}

fn train_edges<F: bam::autodiff::Real>(
    args: &TrainArgs,
    config: &RunConfig,
    trace_path: &Path,
) -> CmdResult {
    let outcome = match &args.resume {
        None => train_on_the_fly::<F>(&config.train, print_epoch).map_err(train_failure)?,
        Some(resume_path) => {
            let params = checkpoint_load_for_model::<F>(resume_path, &config.train.model)
                .map_err(|e| Failure::io(format!("{}: {e}", resume_path.display())))?;
            continue_training(&config.train, params, args.start_epoch, print_epoch)
                .map_err(train_failure)?
        }
    };
    checkpoint_save(&outcome.params, &args.out)
        .map_err(|e| Failure::io(format!("{}: {e}", args.out.display())))?;
    write_trace_csv(&outcome.trace, create_file(trace_path)?)
        .map_err(|e| format_error(trace_path, e))?;
    println!(
        "saved checkpoint {} and trace {}",
        args.out.display(),
        trace_path.display()
    );
    Ok(())
}

fn train_orientations<F: bam::autodiff::Real>(
    args: &TrainArgs,
    config: &RunConfig,
    trace_path: &Path,
) -> CmdResult {
    let print_vepoch = |stats: &VStructureEpoch| {
        println!("epoch {}: loss {:.6}", stats.epoch, stats.loss);
    };
    let outcome =
        train_vstructure::<F>(&config.vstructure, print_vepoch).map_err(|e| match &e {
            CpdagNetError::Train(inner) => train_failure_ref(inner, &e),
            CpdagNetError::Sem(_) | CpdagNetError::NoImmoralityWorlds { .. } => {
                Failure::training(e.to_string())
            }
            CpdagNetError::InvalidConfig(_) => Failure::usage(e.to_string()),
            _ => Failure::io(e.to_string()),
        })?;
    checkpoint_save(&outcome.params, &args.out)
        .map_err(|e| Failure::io(format!("{}: {e}", args.out.display())))?;
    let trace: Vec<EpochStats> = outcome
        .trace
        .iter()
        .map(|s| EpochStats {
            epoch: s.epoch,
            loss: bam::train::LossBreakdown::from_parts(s.loss, 0.0, 0.0),
        })
        .collect();
    write_trace_csv(&trace, create_file(trace_path)?).map_err(|e| format_error(trace_path, e))?;
    println!(
        "saved checkpoint {} and trace {}",
        args.out.display(),
        trace_path.display()
    );
    Ok(())
}

fn train_failure_ref(inner: &TrainError, outer: &CpdagNetError) -> Failure {
    match inner {
        TrainError::NonFiniteLoss { .. }
        | TrainError::NonFiniteGradient { .. }
        | TrainError::Data(_) => Failure::training(outer.to_string()),
        TrainError::InvalidConfig(_) => Failure::usage(outer.to_string()),
        _ => Failure::io(outer.to_string()),
    }
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InferArgs {
    /// Stage-1 checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Input data CSV with a v1..vd header.
    #[arg(long)]
    data: PathBuf,
    /// Prediction JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// Also estimate a CPDAG (requires --model2).
    #[arg(long)]
    cpdag: bool,
    /// Orientation-network checkpoint used with --cpdag.
    #[arg(long)]
    model2: Option<PathBuf>,
    /// JSON run configuration describing the model architectures.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Orientation probability threshold used with --cpdag.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// CPDAG JSON output (default: --out with `.cpdag.json`).
    #[arg(long)]
    cpdag_out: Option<PathBuf>,
    /// Immorality report CSV output (default: --out with `.immoralities.csv`).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    if args.cpdag && args.model2.is_none() {
        return Err(Failure::usage("--cpdag requires --model2"));
    }
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Failure::usage(format!(
            "--threshold must lie strictly between 0 and 1, got {}",
            args.threshold
        )));
    }
    let config = load_run_config(args.config.as_deref())?;
    let precision = effective_precision(config.train.model.precision)?;
    match precision {
        Precision::F32 => infer_with::<f32>(&args, &config),
        Precision::F64 => infer_with::<f64>(&args, &config),
    }
}

fn infer_with<F: bam::autodiff::Real>(args: &InferArgs, config: &RunConfig) -> CmdResult {
    let raw = read_data_csv(open_file(&args.data)?).map_err(|e| format_error(&args.data, e))?;
    let data: Array2<f64> = standardize_columns(&raw);
    let params = checkpoint_load_for_model::<F>(&args.model, &config.train.model)
        .map_err(|e| Failure::io(format!("{}: {e}", args.model.display())))?;

    let probs = bam::eval::infer_edge_probabilities(&params, &config.train.model, &data)
        .map_err(|e| Failure::io(format!("inference failed: {e}")))?;
    write_prediction_json(&probs, create_file(&args.out)?)
        .map_err(|e| format_error(&args.out, e))?;
    println!(
        "wrote {} ({}x{}x3)",
        args.out.display(),
        data.ncols(),
        data.ncols()
    );

    if args.cpdag {
        let model2 = args.model2.as_ref().expect("checked above");
        let probe = init_vstructure_params::<F>(
            &config.vstructure.model,
            &mut substream(0, "checkpoint/shape-probe"),
        );
        let stage2 = checkpoint_load_matching::<F>(model2, &probe)
            .map_err(|e| Failure::io(format!("{}: {e}", model2.display())))?;
        let estimate = estimate_cpdag(
            &data,
            &params,
            &config.train.model,
            &stage2,
            &config.vstructure.model,
            args.threshold,
        )
        .map_err(|e| Failure::io(format!("orientation failed: {e}")))?;
        let cpdag_path = args
            .cpdag_out
            .clone()
            .unwrap_or_else(|| with_suffix(&args.out, ".cpdag.json"));
        let report_path = args
            .report_out
            .clone()
            .unwrap_or_else(|| with_suffix(&args.out, ".immoralities.csv"));
        write_cpdag_json(&estimate.cpdag, create_file(&cpdag_path)?)
            .map_err(|e| format_error(&cpdag_path, e))?;
        write_immorality_csv(&estimate.reports, create_file(&report_path)?)
            .map_err(|e| format_error(&report_path, e))?;
        println!(
            "wrote {} and {}",
            cpdag_path.display(),
            report_path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Stage-1 checkpoint to benchmark.
    #[arg(long)]
    model: PathBuf,
    /// Optional orientation checkpoint; adds a two-step benchmark entry.
    #[arg(long)]
    model2: Option<PathBuf>,
    /// Benchmark grid JSON; unmentioned fields take defaults.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// JSON run configuration describing the model architectures.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Override the grid's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the grid's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Orientation probability threshold for the two-step entry.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let config = load_run_config(args.config.as_deref())?;
    let mut grid = match &args.grid {
        None => BenchmarkGrid::default(),
        Some(path) => {
            let reader = open_file(path)?;
            serde_json::from_reader(reader)
                .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(trials) = args.trials {
        grid.trials = trials;
    }
    if let Some(seed) = args.seed {
        grid.seed = seed;
    }
    grid.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let precision = effective_precision(config.train.model.precision)?;
    match precision {
        Precision::F32 => eval_with::<f32>(&args, &config, &grid),
        Precision::F64 => eval_with::<f64>(&args, &config, &grid),
    }
}

fn model_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_owned())
}

fn eval_with<F: bam::autodiff::Real>(
    args: &EvalArgs,
    config: &RunConfig,
    grid: &BenchmarkGrid,
) -> CmdResult {
    let stage1 = checkpoint_load_for_model::<F>(&args.model, &config.train.model)
        .map_err(|e| Failure::io(format!("{}: {e}", args.model.display())))?;
    let stage2 = match &args.model2 {
        None => None,
        Some(path) => {
            let probe = init_vstructure_params::<F>(
                &config.vstructure.model,
                &mut substream(0, "checkpoint/shape-probe"),
            );
            Some(
                checkpoint_load_matching::<F>(path, &probe)
                    .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?,
            )
        }
    };

    let stem = model_stem(&args.model);
    let two_step_id = format!("{stem}+cpdag");
    let mut models = vec![BenchmarkModel {
        id: &stem,
        params: &stage1,
        config: &config.train.model,
        stage2: None,
    }];
    if let Some(stage2) = &stage2 {
        models.push(BenchmarkModel {
            id: &two_step_id,
            params: &stage1,
            config: &config.train.model,
            stage2: Some(Stage2Model {
                params: stage2,
                config: &config.vstructure.model,
                orientation_threshold: args.threshold,
            }),
        });
    }

    let out = create_file(&args.out)?;
    let table = run_benchmark(grid, &models, out)
        .map_err(|e| Failure::io(format!("benchmark failed: {e}")))?;
    println!(
        "wrote {}: {} result rows, {} failed trials",
        args.out.display(),
        table.reports.len(),
        table.failures.len()
    );
    if table.reports.is_empty() && !table.failures.is_empty() {
        return Err(Failure::training(format!(
            "all {} trials failed; first error: {}",
            table.failures.len(),
            table.failures[0].error
        )));
    }
    Ok(())
}
