use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cwssnet_cli::analyze::{DEFAULT_LEVELS, DEFAULT_RECEPTIVE_FIELDS};
use cwssnet_cli::{
    cmd_ablate, cmd_analyze_params, cmd_eval, cmd_predict, cmd_synth, cmd_train, exit_code, init_threads, Console,
    Overrides, RunConfig,
};

/// Hyperspectral scene segmentation with wavelet binary convolutions and
/// multi-channel attention.
#[derive(Parser, Debug)]
#[command(name = "cwssnet", version)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic labelled scene.
    Synth(Flags),
    /// Fit PCA, train, and save the best checkpoint with its trace.
    Train(Flags),
    /// Score a checkpoint on a labelled scene.
    Eval(Flags),
    /// Write a label map (PPM and label container) for a scene.
    Predict(Flags),
    /// Compare wavelet and standard convolution parameter counts.
    AnalyzeParams {
        /// Receptive fields R.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RECEPTIVE_FIELDS)]
        r: Vec<usize>,
        /// Decomposition levels L.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LEVELS)]
        l: Vec<usize>,
        /// Input channels.
        #[arg(long, default_value_t = 32)]
        c_in: usize,
    },
    /// Run the module ablation grid and the kernel grid.
    Ablate(Flags),
}

#[derive(clap::Args, Debug)]
struct Flags {
    #[command(flatten)]
    overrides: Overrides,
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Command::Synth(f) | Command::Train(f) | Command::Eval(f) | Command::Predict(f) | Command::Ablate(f) =
        &cli.command
    {
        f.overrides.apply(&mut cfg);
    }
    let cfg = cfg.finalize()?;
    let console = Console { quiet: cli.quiet };
    match cli.command {
        Command::Synth(_) => cmd_synth(&cfg, &console).map(drop),
        Command::Train(_) => cmd_train(&cfg, &console).map(drop),
        Command::Eval(_) => cmd_eval(&cfg, &console).map(drop),
        Command::Predict(_) => cmd_predict(&cfg, &console).map(drop),
        Command::AnalyzeParams { r, l, c_in } => cmd_analyze_params(&cfg, &r, &l, c_in, &console).map(drop),
        Command::Ablate(_) => cmd_ablate(&cfg, &console).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
