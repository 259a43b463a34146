use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use owf_cli::commands;
use owf_cli::config::RunConfig;
use owf_core::Error;

/// Open-world detection workbench: teacher-assisted label generation,
/// down-weight training, and open-world evaluation at desk scale.
#[derive(Parser)]
#[command(name = "owf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disables the non-paper guards (negative targets, overlap suppression).
    #[arg(long)]
    strict_paper: bool,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Merge ground-truth annotations with aligned teacher detections.
    Align {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the detector on the seeded synthetic benchmark.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint (or a detections file) on the evaluation split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained checkpoint to run inference with.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Precomputed detections (JSONL) instead of a checkpoint.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Run the multi-episode protocol: align, train, evaluate, advance.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.strict_paper {
        cfg.strict_paper = true;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run() -> Result<Option<String>, Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Align { common } => {
            let summary = commands::cmd_align(&load_config(common)?)?;
            println!(
                "aligned {} images: {} ground truth + {} teacher labels ({} raw)",
                summary.images,
                summary.ground_truth_labels,
                summary.teacher_aligned,
                summary.teacher_raw
            );
            Ok(None)
        }
        Command::Train { common } => {
            let summary = commands::cmd_train(&load_config(common)?)?;
            match summary.final_loss {
                Some(loss) => println!(
                    "trained {} epochs, final mean loss {loss:.4} -> {}",
                    summary.epochs,
                    summary.checkpoint.display()
                ),
                None => println!("wrote initial checkpoint to {}", summary.checkpoint.display()),
            }
            Ok(summary.diverged)
        }
        Command::Eval { common, checkpoint, detections } => {
            let summary = commands::cmd_eval(
                &load_config(common)?,
                checkpoint.as_deref(),
                detections.as_deref(),
            )?;
            println!(
                "mAP {:?}  U-Recall {:?}  A-OSE {}",
                summary.map_both, summary.u_recall, summary.a_ose
            );
            Ok(None)
        }
        Command::Pipeline { common } => {
            let summary = commands::cmd_pipeline(&load_config(common)?)?;
            for episode in &summary.episodes {
                println!(
                    "episode {}: known {} mAP {:?} U-Recall {:?}",
                    episode.episode,
                    episode.known_classes,
                    episode.report.map_both,
                    episode.report.u_recall
                );
            }
            Ok(summary.diverged)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(fault)) => {
            eprintln!("numeric fault: {fault}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_VALIDATION,
            };
            ExitCode::from(code)
        }
    }
}
