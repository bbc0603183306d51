use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use llirl::harness::{self, ExperimentConfig};
use llirl::{Error, Method, SequenceMode};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "llirl", version, about = "Lifelong RL with a CRP mixture of environment models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write curves, cluster trace, summary and library.
    Run(RunArgs),
    /// Run every ζ in the config's `zeta_sweep` and print a comparison table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print cluster count, masses and metadata of a saved library.
    InspectLibrary { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Llirl,
    Ca,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    env_type: Option<u8>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Number of periods.
    #[arg(long = "T", alias = "periods")]
    periods: Option<usize>,
    /// Policy iterations per period.
    #[arg(long = "J", alias = "iterations")]
    iterations: Option<usize>,
    /// Episodes per policy-gradient batch.
    #[arg(long = "m", alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cycle K random base configurations instead of drawing one per period.
    #[arg(long)]
    cycled: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, Failure> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => ExperimentConfig::from_json_file(p).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("cannot read {}: {io}", p.display())),
            other => Failure::Usage(other.to_string()),
        }),
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(v) = args.env_type {
        cfg.env_type = v;
    }
    if let Some(m) = args.method {
        cfg.method = match m {
            MethodArg::Llirl => Method::Llirl,
            MethodArg::Ca => Method::Ca,
        };
    }
    if let Some(v) = args.periods {
        cfg.periods = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.zeta {
        cfg.zeta = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(k) = args.cycled {
        cfg.sequence = SequenceMode::Cycled { k };
    }
    if let Some(out) = args.out {
        cfg.out_dir = Some(out);
    }
    if cfg.out_dir.is_none() {
        return Err(Failure::Usage("--out DIR is required (or `out_dir` in the config)".into()));
    }
    cfg.validate()?;
    let summary = harness::run_experiment(&cfg)?;
    println!(
        "{:?}: {} periods, average return {:.4} ± {:.4}, {} cluster(s)",
        summary.method, summary.periods_completed, summary.overall_average, summary.standard_error, summary.final_clusters
    );
    Ok(())
}

fn sweep(config: PathBuf, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(Some(&config))?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    let report = harness::run_sweep(&cfg)?;
    print!("{}", report.table());
    if report.rows.iter().all(|r| r.error.is_some()) {
        return Err(Failure::Runtime("every run in the sweep failed".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Sweep { config, out } => sweep(config, out),
        Command::InspectLibrary { file } => harness::inspect_library(&file)
            .map(|info| print!("{info}"))
            .map_err(|e| Failure::Runtime(e.to_string())),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
