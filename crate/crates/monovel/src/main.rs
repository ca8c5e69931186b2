//! Command-line entry point: dataset generation, training, evaluation,
//! ablation sweeps, and plotting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use monovel::harness::{
    ablate, datagen, evaluate_checkpoint, plot, train, write_prediction_csv, Checkpoint,
    DatagenConfig, RunConfig, CHECKPOINT_FILE, TRAIN_LOG_FILE,
};

#[derive(Parser)]
#[command(
    name = "monovel",
    about = "Joint vehicle velocity and distance estimation from monocular frame pairs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving-scene dataset.
    Datagen {
        /// Scene configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the log and checkpoint.
    Train {
        /// Run configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (falls back to the config's `dataset` field).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the training log and checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a report plus a per-vehicle CSV.
    Eval {
        /// Checkpoint file produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// Report output path (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Per-vehicle CSV path; defaults to the report path with `.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate a family of configs that differ along the given
    /// axes, then emit a comparison table.
    Ablate {
        /// Base run configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset (`table5`, `table6`) or comma-separated switch names.
        #[arg(long)]
        axes: String,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dataset directory; defaults to the training set.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Output directory for per-run artifacts and the table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plots from an evaluation report or a training log.
    Plot {
        /// Evaluation report (JSON) to plot.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Training log (line-delimited JSON) to plot.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Output directory for PNGs and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Datagen { config, out } => {
            let config = match config {
                Some(path) => DatagenConfig::load(&path)?,
                None => DatagenConfig::default(),
            };
            let count = datagen(&config, &out)?;
            println!("wrote {count} clips to {}", out.display());
        }
        Command::Train { config, data, out } => {
            let config = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let data_dir = data
                .or_else(|| config.dataset.clone())
                .ok_or_else(|| anyhow::anyhow!("pass --data or set `dataset` in the config"))?;
            let ckpt = train(&config, &data_dir, &out)?;
            println!(
                "trained {} epochs; best loss {:.6} at epoch {}; log {}; checkpoint {}",
                ckpt.epoch,
                ckpt.best.loss,
                ckpt.best.epoch,
                out.join(TRAIN_LOG_FILE).display(),
                out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { ckpt, data, report, csv } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let (eval_report, rows) = evaluate_checkpoint(&checkpoint, &data)?;
            if let Some(parent) = report.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&report, serde_json::to_string_pretty(&eval_report)?)?;
            let csv_path = csv.unwrap_or_else(|| report.with_extension("csv"));
            write_prediction_csv(&rows, &csv_path)?;
            println!("{}", eval_report.to_table());
            println!("report {}; csv {}", report.display(), csv_path.display());
        }
        Command::Ablate { config, axes, data, eval_data, out } => {
            let base = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let eval_dir = eval_data.unwrap_or_else(|| data.clone());
            let table = ablate(&base, &axes, &data, &eval_dir, &out)?;
            print!("{}", table.to_table());
            println!("artifacts in {}", out.display());
        }
        Command::Plot { report, log, out } => {
            let manifest = plot(report.as_deref(), log.as_deref(), &out)?;
            for file in &manifest.files {
                println!("{}", file.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
