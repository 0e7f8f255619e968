use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::CliError;

#[derive(Parser)]
#[command(name = "dadu", version, about = "Dense dual-attention U-Net for cardiac MRI segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian noise standard deviation.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train from a `key = value` run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train a single cross-validation fold.
        #[arg(long)]
        fold: Option<usize>,
        /// Continue from `latest.dadu` / `latest.state` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Override a configuration value, e.g. `--set epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV; defaults to `<checkpoint>.metrics.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resize images and masks to `size x size`.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Segment one image into a paletted PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the attention maps of every decoder level here.
        #[arg(long)]
        maps: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Finite-difference check of the backward rules.
    Gradcheck {
        /// `all` or comma-separated op names.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            noise,
        } => commands::synth(&out, count, size, seed, noise),
        Command::Train {
            config,
            fold,
            resume,
            overrides,
        } => commands::train(&config, fold, resume, &overrides),
        Command::Eval {
            checkpoint,
            data,
            out,
            size,
        } => commands::eval(&checkpoint, &data, out, size),
        Command::Predict {
            checkpoint,
            image,
            out,
            maps,
            size,
        } => commands::predict(&checkpoint, &image, &out, maps.as_deref(), size),
        Command::Gradcheck { ops, seed, fault } => commands::gradcheck(&ops, seed, fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
