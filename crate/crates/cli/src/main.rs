//! `gcas`: dataset generation, training, sampling, ablations and reports.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 I/O error,
//! 4 numeric failure, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guided_cascade::config::{parse_override, RunConfig};
use guided_cascade::Error;

#[derive(Parser, Debug)]
#[command(name = "gcas", version, about = "Guided multi-resolution latent diffusion at desk scale")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, as `key=value`. Repeatable; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic labeled dataset.
    MakeDataset {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent codec and write its checkpoint.
    TrainCodec {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the base denoiser or the adapters.
    Train {
        /// `base` or `adapter`.
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generate the synthetic dataset first if the data root has no index.
        #[arg(long)]
        make_data: bool,
        #[arg(long)]
        codec: PathBuf,
        /// Base-phase checkpoint; required for the adapter phase.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step JSONL log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate images through both stages.
    Sample {
        /// Model checkpoint from either phase.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Output size as HxW, in pixels. Repeatable.
        #[arg(long = "size", required = true)]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance extraction time.
        #[arg(long)]
        t_extract: Option<f64>,
        /// Sample the high-resolution branch without guidance.
        #[arg(long)]
        no_guidance: bool,
        /// Disable scale-aware normalization.
        #[arg(long)]
        no_san: bool,
        /// Output directory.
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Print frozen and trainable parameter counts.
    ReportParams {
        /// Model checkpoint to inspect.
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        /// Named preset to build and inspect instead.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train every ablation variant from one base checkpoint.
    Ablate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// JSONL report, one record per variant.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction PSNR of the codec over the held-out images.
    EvalCodec {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Compare every image with itself instead of its reconstruction.
        #[arg(long)]
        identical: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::Input(_) | Error::Config(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Corrupt { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Internal(_) => 1,
    }
}

fn run(cli: Cli) -> guided_cascade::Result<()> {
    let mut overrides = cli.set.iter().map(|s| parse_override(s)).collect::<guided_cascade::Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend(commands::flag_overrides(&cli.command));
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    for (k, v) in config.entries() {
        log::info!("config {k} = {v}");
    }
    commands::dispatch(&cli.command, &config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
