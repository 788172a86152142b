//! `motioncast` — synthesize data, train, forecast, and score single-person
//! global motion.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use motioncast_cli as cli;

#[derive(Parser)]
#[command(
    name = "motioncast",
    about = "Single-person global motion forecasting: DCT trajectories completed by a residual GCN",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config value by dotted key, e.g. --set training.epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output dataset path (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a forecaster; writes checkpoint and reports into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Restrict forecast loss to the first fusion.short_frames frames.
        #[arg(long)]
        short_term: bool,
    },
    /// Forecast every window of a dataset with one or more checkpoints.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path; repeat to average several models.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Short-term and long-term checkpoints to stitch together.
        #[arg(long, num_args = 2, value_names = ["SHORT", "LONG"])]
        fuse: Option<Vec<PathBuf>>,
        /// Input dataset.
        #[arg(long)]
        data: PathBuf,
        /// Output prediction file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and validate one model per parameter-grid point.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                e.print().ok();
                std::process::exit(1);
            }
            e.print().ok();
            std::process::exit(0);
        }
    };
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = cli::load_config(common.config.as_deref(), &common.sets, common.seed)?;
            cli::cmd_synth(&cfg, &out)?;
        }
        Command::Train {
            common,
            out,
            short_term,
        } => {
            let cfg = cli::load_config(common.config.as_deref(), &common.sets, common.seed)?;
            let summary = cli::cmd_train(&cfg, &out, short_term)?;
            if let Some(v) = summary.best_val {
                println!("best validation metric: {v:.6}");
            }
            println!("checkpoint: {}", summary.checkpoint_path.display());
            if summary.diverged {
                return Err(motioncast::Error::Diverged(
                    "training stopped early; checkpoint holds the last good model".into(),
                )
                .into());
            }
        }
        Command::Predict {
            common,
            models,
            fuse,
            data,
            out,
        } => {
            let cfg = cli::load_config(common.config.as_deref(), &common.sets, common.seed)?;
            let fuse_pair = fuse
                .as_ref()
                .map(|pair| (pair[0].as_path(), pair[1].as_path()));
            cli::cmd_predict(&cfg, &models, fuse_pair, &data, &out)?;
            println!("predictions: {}", out.display());
        }
        Command::Eval {
            common,
            pred,
            gt,
            out,
        } => {
            let cfg = cli::load_config(common.config.as_deref(), &common.sets, common.seed)?;
            let report = cli::cmd_eval(&cfg, &pred, &gt, &out)?;
            for ((off, frame), value) in report
                .offsets_ms
                .iter()
                .zip(&report.frames)
                .zip(&report.per_offset)
            {
                println!("{off:>7} ms (frame {frame:>2}): {value:.6}");
            }
            println!("average: {:.6}", report.average);
        }
        Command::Sweep { common, out } => {
            let cfg = cli::load_config(common.config.as_deref(), &common.sets, common.seed)?;
            let rows = cli::cmd_sweep(&cfg, &out)?;
            println!("{:>8} {:>7} {:>9} {:>12}", "scale", "#block", "#channel", "average");
            for r in &rows {
                let avg = r
                    .average
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| r.error.clone().unwrap_or_else(|| "-".into()));
                println!(
                    "{:>8} {:>7} {:>9} {:>12}",
                    r.scale, r.num_blocks, r.hidden_channels, avg
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(cli::exit_code_for(&err) as u8)
        }
    }
}
