use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use phs_core::config::{load_config, Preset, RunConfig};
use phs_core::metrics::{DetectorKind, ThresholdDetector};
use phs_core::pipeline::{run, Command, EvalArgs, InferArgs, MaskArg, Outcome, RunOptions};
use phs_core::Error;

#[derive(Parser, Debug)]
#[command(name = "phs", version, about = "Pseudo-healthy brain MRI reconstruction pipeline")]
struct Cli {
    /// TOML run configuration. Without it the preset defaults are used,
    /// with paths relative to the working directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic phantom cohort to the data root.
    SynthData,
    /// Build the slice cache and subject split from the data root.
    Preprocess,
    /// Stage 1: inpainting fine-tuning of the denoiser.
    TrainSd,
    /// Stage 2: control-branch training on edge maps.
    TrainControlnet,
    /// Reconstruct tumorous slices with a stage-2 checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Cache sidecar JSON or NIfTI volume; defaults to the cached test split.
        #[arg(long)]
        input: Option<PathBuf>,
        /// `auto` or a grayscale PNG mask.
        #[arg(long, default_value = "auto")]
        mask: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score reconstructions: FID, contralateral SSIM, false-positive rate.
    Evaluate {
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Slice cache holding the healthy reference slices.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        detector: Option<DetectorArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DetectorArg {
    Threshold,
    Segmenter,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PHS_LOG", "info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p, cli.preset)?,
        None => {
            let base = std::env::current_dir().map_err(|e| Error::Config(vec![format!("working directory: {e}")]))?;
            phs_core::config::parse_config("", cli.preset, &base)?
        }
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Error> {
    let cfg = resolve_config(&cli)?;
    let mut opts = RunOptions { force: cli.force, ..RunOptions::default() };
    let command = match cli.command {
        Cmd::SynthData => Command::SynthData,
        Cmd::Preprocess => Command::Preprocess,
        Cmd::TrainSd => Command::TrainSd,
        Cmd::TrainControlnet => Command::TrainControlnet,
        Cmd::Infer { checkpoint, input, mask, steps, out } => {
            let mask = if mask == "auto" { MaskArg::Auto } else { MaskArg::Path(mask.into()) };
            opts.infer = InferArgs { checkpoint, input, mask, steps, seed: cli.seed, out };
            Command::Infer
        }
        Cmd::Evaluate { generated, reference, detector, out } => {
            let detector = detector.map(|d| match (d, &cfg.evaluate.detector) {
                (DetectorArg::Threshold, DetectorKind::Threshold(t)) => DetectorKind::Threshold(*t),
                (DetectorArg::Threshold, _) => DetectorKind::Threshold(ThresholdDetector::desk()),
                (DetectorArg::Segmenter, DetectorKind::Segmenter { weights }) => DetectorKind::Segmenter { weights: weights.clone() },
                (DetectorArg::Segmenter, _) => DetectorKind::Segmenter { weights: "brats-segmenter".into() },
            });
            opts.eval = EvalArgs { generated, reference, detector, out };
            Command::Evaluate
        }
        Cmd::PrintConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    match run(command, &cfg, &opts)? {
        Outcome::Completed(rec) => println!("{}: done in {:.1}s", command.name(), rec.wall_time_s),
        Outcome::Skipped(p) => println!("{}: {} already exists, nothing to do (use --force to rerun)", command.name(), p.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
