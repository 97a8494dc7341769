//! The `ampl` command-line driver.

use std::ffi::OsString;
use std::path::PathBuf;

use ampl::config::Variant;
use ampl::env::Quality;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod error;
pub mod manifest;

pub use error::{CliError, Result, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

pub const THREADS_VAR: &str = "AMPL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ampl", version, about = "Offline alternating model-policy learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the exact tabular check suite.
    Verify(VerifyArgs),
    /// Collect an offline point-mass dataset.
    GenDataset(GenDatasetArgs),
    /// Train one run and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a trained policy on the point-mass environment.
    Eval(EvalArgs),
    /// Train every variant over several seeds and summarize.
    Ablate(AblateArgs),
    /// Write raw and normalized importance weights for every transition.
    MiwDump(MiwDumpArgs),
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub num_mdps: usize,
    /// Comma-separated `check=value` pairs.
    #[arg(long)]
    pub tolerance_overrides: Option<String>,
    /// Directory for the JSON report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub flip_prefactor: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub quality: Quality,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON run config; the preset is used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Use the desk-scale preset.
    #[arg(long, conflicts_with = "config")]
    pub desk_scale: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// A run directory, its checkpoint, or the agent directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants; all of them when absent.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    /// Comma-separated seeds; the config's seeds when absent.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, conflicts_with = "config")]
    pub desk_scale: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MiwDumpArgs {
    /// A run directory, its checkpoint, or the estimator directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output CSV path; the manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Worker count from `AMPL_THREADS`, defaulting to the number of cores.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &recorded) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command inside a pool capped by `AMPL_THREADS`.
pub fn execute(command: Command, args: &[String]) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap()?)
        .build()
        .map_err(|e| CliError::usage(format!("cannot build thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Verify(a) => commands::cmd_verify(&a, args).map(|_| ()),
        Command::GenDataset(a) => commands::cmd_gen_dataset(&a, args).map(|_| ()),
        Command::Train(a) => commands::cmd_train(&a, args).map(|_| ()),
        Command::Eval(a) => commands::cmd_eval(&a, args).map(|_| ()),
        Command::Ablate(a) => commands::cmd_ablate(&a, args).map(|_| ()),
        Command::MiwDump(a) => commands::cmd_miw_dump(&a, args).map(|_| ()),
    })
}
