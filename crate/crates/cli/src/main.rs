use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use disentangle_cli::commands::{self, GenerateMode, GenerateRequest};
use disentangle_cli::config::{Ablation, ExperimentConfig, Metric};

#[derive(Parser)]
#[command(name = "disentangle", version, about = "Train and inspect content/style disentanglement models")]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Forces deterministic mode.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Builds the colorized dataset in the cache ($DISENTANGLE_CACHE).
    Prepare,
    /// Trains a model, or resumes one with --checkpoint.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablation: Vec<Ablation>,
    },
    /// Renders swap grids, latent walks or landmark overlays.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "swap-grid")]
        mode: GenerateMode,
        /// Test-split indices of the input images.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        images: Vec<usize>,
        /// Test-split indices of the style rows of a swap grid.
        #[arg(long, value_delimiter = ',')]
        styles: Option<Vec<usize>>,
        /// Frames per interpolation.
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Computes metrics and writes report.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics to run; defaults to the config's selection.
        #[arg(long = "metric", value_enum)]
        metrics: Vec<Metric>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if cli.deterministic {
        cfg.train.deterministic = true;
    }
    if let Command::Train { ablation, .. } = &cli.command {
        for a in ablation {
            a.apply(&mut cfg.train);
        }
    }
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());

    match cli.command {
        Command::Prepare => {
            let p = commands::prepare(&cfg)?;
            let verb = if p.written { "prepared" } else { "already up to date:" };
            println!("{verb} {} (manifest {})", p.dir.display(), p.manifest_digest);
        }
        Command::Train { checkpoint, .. } => {
            println!("config digest {}", cfg.digest());
            let outcome = commands::train(&cfg, &out, checkpoint.as_deref(), &mut |s| println!("{s}"))
                .context("training failed")?;
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Generate {
            checkpoint,
            mode,
            images,
            styles,
            steps,
        } => {
            let req = GenerateRequest {
                mode,
                images,
                styles,
                steps,
            };
            let path = commands::generate(&cfg, &checkpoint, &req, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { checkpoint, metrics } => {
            let metrics = if metrics.is_empty() { cfg.eval.metrics.clone() } else { metrics };
            let report = commands::evaluate(&cfg, &checkpoint, &metrics, &out)?;
            print!("{}", report.summary());
            println!("wrote {}", out.join("report.csv").display());
        }
    }
    Ok(())
}
