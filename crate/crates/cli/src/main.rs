use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use inrpatch::{cmd_extrapolate, cmd_profile, cmd_sample, cmd_superres, cmd_train};

#[derive(Parser)]
#[command(
    name = "inrpatch",
    version,
    about = "Coordinate-based GAN trainer with coarse-to-fine patch stages"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every stage of a config; writes checkpoints, metrics.csv and sample sheets.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tile `n` samples at the checkpoint's native lattice.
    Sample(ViewArgs),
    /// Render beyond the image border by `margin` of the side on every edge.
    Extrapolate {
        #[command(flatten)]
        view: ViewArgs,
        #[arg(long, default_value_t = 0.25)]
        margin: f64,
    },
    /// Render on a lattice `factor` times denser than the native one.
    Superres {
        #[command(flatten)]
        view: ViewArgs,
        #[arg(long, default_value_t = 2)]
        factor: usize,
    },
    /// Measure activations, peak memory and iteration time of all modes.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    n: usize,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out } => {
            let s =
                cmd_train(&config, seed, out.as_deref()).with_context(|| format!("training {}", config.display()))?;
            println!("{}", s.metrics_csv.display());
            for c in s.checkpoints {
                println!("{}", c.display());
            }
        }
        Command::Sample(v) => {
            cmd_sample(&v.checkpoint, v.n, v.seed, &v.out)?;
        }
        Command::Extrapolate { view: v, margin } => {
            cmd_extrapolate(&v.checkpoint, margin, v.n, v.seed, &v.out)?;
        }
        Command::Superres { view: v, factor } => {
            cmd_superres(&v.checkpoint, factor, v.n, v.seed, &v.out)?;
        }
        Command::Profile { config, seed, out } => {
            cmd_profile(&config, seed, out.as_deref())?;
        }
    }
    Ok(())
}
