mod commands;
mod config;
mod json;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Verify(String),
    Lib(freqsens::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        use freqsens::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Io(_) => 4,
            CliError::Lib(e) => match e {
                E::InvalidArgument(_) | E::Shape(_) | E::Unsupported(_) | E::Json(_) => 2,
                E::Numerical(_) | E::NonFiniteLoss { .. } => 3,
                E::Io(_) | E::Format(_) => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<freqsens::Error> for CliError {
    fn from(e: freqsens::Error) -> Self {
        CliError::Lib(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "freqsens", version, about = "Frequency sensitivity of linear and ReLU CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation splits and a sidecar describing them.
    Gen {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Spectral std map, radial curve and power-law fit of a dataset split.
    Stats {
        /// Directory written by `gen`.
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Plain index distances instead of distances on the discrete torus.
        #[arg(long, conflicts_with = "modular")]
        plain: bool,
        #[arg(long)]
        modular: bool,
        #[arg(long)]
        highpass: Option<usize>,
        /// Also estimate the full covariance with this batch size (small shapes only).
        #[arg(long)]
        covariance: Option<usize>,
        #[arg(long)]
        fit_r_max: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network; writes a checkpoint, history and final metrics.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the run's checkpoint when one exists.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in total, leaving a resumable checkpoint.
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// Sensitivity map and curve of a trained network on a dataset split.
    Sense {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = freqsens::sensitivity::DEFAULT_MAX_IMAGES)]
        max_images: usize,
        #[arg(long, conflicts_with = "modular")]
        plain: bool,
        #[arg(long)]
        modular: bool,
        #[arg(long, default_value_t = 3)]
        smooth: usize,
        /// Skip the alignment against the training split's std curve.
        #[arg(long)]
        no_align: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized checks: holder, factorization, thm1, ridge, lasso, lemmas, gradients.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trials: Option<usize>,
        /// Channel widths `C,C1,K` for thm1.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Depth for thm1.
        #[arg(long = "L")]
        depth: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run gen, train and sense for every point of the config's sweep section.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli, output_dir: Option<PathBuf>) -> CliResult<()> {
    let ov = |seed| config::Overrides {
        seed,
        output_dir: output_dir.clone(),
    };
    match cli.command {
        Command::Gen { config, seed } => {
            let dir = commands::gen(&config::load(&config, &ov(seed))?)?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Stats {
            dataset,
            split,
            plain,
            modular: _,
            highpass,
            covariance,
            fit_r_max,
            out,
        } => {
            let dir = commands::stats(&commands::StatsArgs {
                dataset,
                split,
                modular: !plain,
                highpass,
                covariance,
                fit_r_max,
                out,
            })?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Train {
            config,
            seed,
            resume,
            until_epoch,
        } => {
            let (dir, _) = commands::train(&config::load(&config, &ov(seed))?, resume, until_epoch)?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Sense {
            checkpoint,
            dataset,
            split,
            max_images,
            plain,
            modular: _,
            smooth,
            no_align,
            out,
        } => {
            let dir = commands::sense(&commands::SenseArgs {
                checkpoint,
                dataset,
                split,
                max_images,
                modular: !plain,
                smooth,
                align: !no_align,
                out,
            })?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Verify {
            suite,
            seed,
            trials,
            dims,
            depth,
            out,
        } => {
            let r = commands::verify(&commands::VerifyArgs {
                suite,
                seed,
                trials,
                dims,
                depth,
                out,
            })?;
            eprintln!("{}: {} trials passed, min margin {:e}", r.suite, r.trials.len(), r.min_margin);
        }
        Command::Sweep { config, seed } => {
            let dir = commands::sweep(&config, &ov(seed))?;
            eprintln!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let output_dir = std::env::var_os(config::OUTPUT_DIR_ENV).map(PathBuf::from);
    match run(Cli::parse(), output_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("freqsens: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
