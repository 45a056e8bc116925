use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod output;

use config::RunFlags;

#[derive(Debug, Parser)]
#[command(name = "ldgd", version, about = "Shared-latent Gaussian process classification and generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GenKind {
    /// Moons lifted linearly to `base-dim`, then doubled with noise channels.
    MoonsLinear,
    /// The raw two-dimensional moons.
    Moons,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Rows {
    All,
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    GenData {
        #[arg(long, value_enum, default_value = "moons-linear")]
        kind: GenKind,
        #[arg(long, default_value_t = 5)]
        base_dim: usize,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = ldgd::data::MOON_NOISE)]
        noise: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration ELBO trace (JSON).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Infer latents for data rows and decode their labels.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Rows to score; defaults to the held-out rows when the run used a split.
        #[arg(long, value_enum)]
        rows: Option<Rows>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Like `predict`, and also score the predictions.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum)]
        rows: Option<Rows>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics JSON; printed to stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Export the training latent posterior.
    Latent {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training data, needed for encoder models.
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export both kernels' relevance coefficients and selections.
    Ard {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = ldgd::kernels::DEFAULT_RELEVANCE_RATIO)]
        ratio: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode latent points into feature space.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV of latent points with a header row.
        #[arg(long, conflicts_with = "near_class", required_unless_present = "near_class")]
        points: Option<PathBuf>,
        /// Sample points near this class's latent centroid.
        #[arg(long)]
        near_class: Option<usize>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Add observation noise to the decoded means.
        #[arg(long)]
        noisy: bool,
        /// Training data, needed for encoder models with --near-class.
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare ELBO gradients with finite differences on random tiny models.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, hide = true)]
        corrupt_block: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
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
    let result = match cli.command {
        Command::GenData {
            kind,
            base_dim,
            n,
            noise,
            seed,
            out,
        } => commands::gen_data(kind, base_dim, n, noise, seed, &out),
        Command::Train { run, out, trace } => commands::train(&run, &out, trace.as_deref()),
        Command::Predict {
            checkpoint,
            run,
            rows,
            out,
        } => commands::predict(&checkpoint, &run, rows, Some(&out), None, false),
        Command::Evaluate {
            checkpoint,
            run,
            rows,
            out,
            metrics,
        } => commands::predict(&checkpoint, &run, rows, out.as_deref(), metrics.as_deref(), true),
        Command::Latent { checkpoint, run, out } => commands::latent(&checkpoint, &run, &out),
        Command::Ard { checkpoint, ratio, out } => commands::ard(&checkpoint, ratio, out.as_deref()),
        Command::Generate {
            checkpoint,
            points,
            near_class,
            count,
            noisy,
            run,
            out,
        } => commands::generate(&checkpoint, points.as_deref(), near_class, count, noisy, &run, &out),
        Command::Gradcheck {
            seed,
            seeds,
            corrupt_block,
            out,
        } => commands::gradcheck(seed, seeds, corrupt_block.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
