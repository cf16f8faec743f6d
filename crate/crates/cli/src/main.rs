use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evfi::net::Ablation;
use evfi_cli::commands::{self, AnalyzeArgs, EdiArgs, InterpArgs};
use evfi_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "evfi", version, about = "Event-guided frame interpolation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config with optional sim, model, train and eval sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides sim.seed and train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for evaluation; training always runs on one.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene, its events and a blurry frame pair.
    Simulate,
    /// Recover a latent frame from one blurry frame and the events.
    ReconstructEdi {
        #[arg(long)]
        manifest: PathBuf,
        /// Which captured frame to deblur (0 or 1).
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        blurry: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        tau: f64,
        /// Contrast threshold; defaults to the manifest's.
        #[arg(long)]
        contrast: Option<f64>,
        /// Quadrature samples; defaults to the exposure length.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Train a model on random toy scenes.
    Train,
    /// Interpolate frames at the given target times.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated target times in seconds.
        #[arg(long, value_delimiter = ',')]
        tau: Option<Vec<f64>>,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Per-bin saliency and importance-map sweep.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Compare ablation variants on the held-out set.
    Eval {
        /// `variant=path`, or a bare path for the full model. Repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.sim.seed = seed;
        cfg.train.seed = seed;
    }
    let out = &c.out;
    match cli.command {
        Command::Simulate => {
            let m = commands::simulate(&cfg, out)?;
            println!("exposure m = {:?}, {} latent frames", m.m, m.latent.len());
        }
        Command::ReconstructEdi {
            manifest,
            frame,
            blurry,
            events,
            tau,
            contrast,
            samples,
            gt,
        } => {
            let args = EdiArgs {
                manifest,
                frame,
                blurry,
                events,
                tau,
                contrast,
                samples,
                gt,
            };
            if let Some(p) = commands::reconstruct_edi(&cfg, &args, out)? {
                println!("psnr_db {p:.4}");
            }
        }
        Command::Train => {
            commands::train(&cfg, out)?;
        }
        Command::Interp {
            checkpoint,
            manifest,
            tau,
            ablation,
        } => {
            let args = InterpArgs {
                checkpoint,
                manifest,
                taus: tau,
                ablation,
            };
            let taus = commands::interp(&cfg, &args, out)?;
            println!("{} frames written", taus.len());
        }
        Command::Analyze {
            checkpoint,
            manifest,
            tau,
            ablation,
        } => {
            let args = AnalyzeArgs {
                checkpoint,
                manifest,
                tau,
                ablation,
            };
            let scores = commands::analyze(&cfg, &args, out)?;
            let shown: Vec<String> = scores.iter().map(|s| format!("{s:.4e}")).collect();
            println!("saliency {}", shown.join(" "));
        }
        Command::Eval { checkpoints } => {
            let parsed = checkpoints
                .iter()
                .map(|a| commands::parse_checkpoint_arg(a))
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", commands::eval(&cfg, &parsed, c.threads, out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
