//! Command-line driver. [`dispatch`] parses arguments, runs one subcommand
//! and maps the outcome to an exit code: 0 on success, 1 for usage and
//! validation errors, 2 for runtime failures.

// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use crystal_core::Error;

mod commands;
pub mod synth;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "crystal",
    version,
    about = "Train, pool and evaluate L2-constrained softmax embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Run settings shared by commands that read a config file.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and classifier head on a feature CSV or IDX files.
    Train {
        /// Feature CSV; rows are labelled by subject id.
        #[arg(long, required_unless_present = "idx_images")]
        data: Option<PathBuf>,
        #[arg(long, requires = "idx_labels", conflicts_with = "data")]
        idx_images: Option<PathBuf>,
        #[arg(long, requires = "idx_images")]
        idx_labels: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for `model.txt`, `head.txt` and `history.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run samples through a trained model and write embeddings as a feature CSV.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required_unless_present = "idx_images")]
        input: Option<PathBuf>,
        #[arg(long, requires = "idx_labels", conflicts_with = "input")]
        idx_images: Option<PathBuf>,
        #[arg(long, requires = "idx_images")]
        idx_labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pool each template of a feature CSV into one row.
    Pool {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Quality pooling with this lambda.
        #[arg(long, conflicts_with = "media_average")]
        lambda: Option<f64>,
        /// Two-stage media averaging instead of quality pooling.
        #[arg(long)]
        media_average: bool,
    },
    /// Score a pair protocol and write ROC, scores and summary.
    EvalVerify {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// 1:N search of probe templates against a gallery.
    EvalIdentify {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        /// Treat probes without a gallery mate as non-mated searches.
        #[arg(long)]
        open_set: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on random small models.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Smallest scale giving average class probability `p` with `C` classes.
    AlphaBound { classes: usize, probability: f64 },
    /// Generate a synthetic dataset with train/test features and protocols.
    Synth(synth::SynthArgs),
    /// TAR at fixed FARs across a grid of lambda or gamma values.
    Sweep {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated grid; defaults depend on the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Comma-separated FAR targets.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-1, 1e-2, 1e-3, 1e-4])]
        far: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    Lambda,
    Gamma,
}

/// Errors surfaced by a subcommand.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// The command ran but its check did not pass.
    Check(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_VALIDATION,
            CliError::Core(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Core(_) | CliError::Check(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Runs the command line `argv` (including the program name) and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_VALIDATION,
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
