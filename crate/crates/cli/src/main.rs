use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skdv::harness::{resolve_threads, run_experiment, with_threads, ExperimentConfig, ExperimentKind};

/// Stochastic KdV soliton experiments.
#[derive(Debug, Parser)]
#[command(name = "skdv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Single path of the full equation started at the soliton.
    Simulate(RunArgs),
    /// Modulation parameters along one path per noise level.
    Track(RunArgs),
    /// Ensemble of the limit system.
    Limit(RunArgs),
    /// Weighted-frame spectrum, semigroup decay and covariance trace.
    Semigroup(RunArgs),
    /// Exit probabilities from the soliton tube.
    ExitTime(RunArgs),
    /// Coupled full and limit paths at decreasing noise levels.
    Clt(RunArgs),
    /// Peak-expectation decay of the order-one diffusion.
    Diffusion(RunArgs),
    /// Parse and validate a configuration file, then print its hash.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON configuration; the experiment preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to SKDV_THREADS or the CPU count).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn fail(err: skdv::Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_input_error() { EXIT_INPUT } else { EXIT_NUMERICAL })
}

fn run(kind: ExperimentKind, args: RunArgs) -> ExitCode {
    let mut cfg = match &args.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
        None => ExperimentConfig::preset(kind),
    };
    cfg.experiment = kind;
    if let Some(seed) = args.seed {
        cfg.ensemble.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output = out;
    }
    let threads = match resolve_threads(args.threads) {
        Ok(n) => n,
        Err(e) => return fail(e),
    };
    let out = cfg.output.clone();
    match with_threads(threads, || run_experiment(&cfg, &out, threads)) {
        Ok(Ok(manifest)) => {
            println!("{}: wrote {} files to {}", manifest.experiment, manifest.files.len(), out.display());
            ExitCode::SUCCESS
        }
        Ok(Err(e)) | Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Simulate(a) => run(ExperimentKind::Simulate, a),
        Command::Track(a) => run(ExperimentKind::Track, a),
        Command::Limit(a) => run(ExperimentKind::Limit, a),
        Command::Semigroup(a) => run(ExperimentKind::Semigroup, a),
        Command::ExitTime(a) => run(ExperimentKind::ExitTime, a),
        Command::Clt(a) => run(ExperimentKind::Clt, a),
        Command::Diffusion(a) => run(ExperimentKind::Diffusion, a),
        Command::ValidateConfig { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                println!("{} ok ({}), hash {}", config.display(), cfg.experiment.name(), cfg.hash());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
