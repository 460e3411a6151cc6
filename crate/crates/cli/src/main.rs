//! `vidistill`: synthetic data, pretraining, probing, evaluation and
//! attention visualization.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "vidistill",
    version,
    about = "Self-distilled video transformer pretraining and probing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic group-activity dataset.
    Synth(SynthArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Fit a linear probe on frozen teacher features and predict.
    Probe(ProbeArgs),
    /// Score a prediction dump against a manifest.
    Eval(EvalArgs),
    /// Visualization utilities.
    #[command(subcommand)]
    Viz(VizCommand),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives `train/` and `test/` splits.
    #[arg(long)]
    out: PathBuf,
    /// JSON generator config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON pretraining config.
    #[arg(long)]
    config: PathBuf,
    /// Training manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long, required_unless_present = "dump_schedules")]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the per-step lr/wd/ema schedule as CSV and exit without training.
    #[arg(long, value_name = "CSV")]
    dump_schedules: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Pretraining checkpoint; its teacher is the frozen backbone.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest the classifier is fitted on.
    #[arg(long)]
    train_manifest: PathBuf,
    /// Manifest to predict; defaults to the training manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON probe config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction dump written by `probe`.
    #[arg(long)]
    predictions: PathBuf,
    /// Ground-truth manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Pool multi-label counts over samples instead of sample-averaging.
    #[arg(long)]
    micro: bool,
    /// Directory for `report.json`; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VizCommand {
    /// Write every view of one training sample as PNG frames.
    DumpViews(DumpViewsArgs),
    /// Overlay the top-k class-token attention locations on source frames.
    Attention(AttentionArgs),
}

#[derive(Args)]
struct DumpViewsArgs {
    /// JSON pretraining config (view geometry and augmentation).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Clip id; defaults to the first record.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Clip id; defaults to the first record.
    #[arg(long)]
    clip: Option<String>,
    /// Frames of the evaluation view.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Evaluation view width and height.
    #[arg(long, num_args = 2, value_names = ["W", "H"], default_values_t = [224, 224])]
    size: Vec<usize>,
    /// Locations per frame (5 for JRDB-PAR-style figures, 4 for Volleyball).
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Rank one head's weights instead of the head average.
    #[arg(long)]
    head: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a.out, a.config.as_deref(), a.seed),
        Command::Pretrain(a) => commands::pretrain(
            &a.config,
            &a.manifest,
            a.out.as_deref(),
            a.resume.as_deref(),
            a.dump_schedules.as_deref(),
        ),
        Command::Probe(a) => commands::probe(
            &a.checkpoint,
            &a.train_manifest,
            a.manifest.as_deref(),
            a.config.as_deref(),
            &a.out,
        ),
        Command::Eval(a) => commands::eval(&a.predictions, &a.manifest, a.micro, a.out.as_deref()),
        Command::Viz(VizCommand::DumpViews(a)) => {
            commands::dump_views(&a.config, &a.manifest, a.clip.as_deref(), a.seed, &a.out)
        }
        Command::Viz(VizCommand::Attention(a)) => {
            commands::attention(&commands::AttentionRequest {
                checkpoint: a.checkpoint,
                manifest: a.manifest,
                clip: a.clip,
                frames: a.frames,
                size: (a.size[0], a.size[1]),
                k: a.k,
                head: a.head,
                out: a.out,
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
