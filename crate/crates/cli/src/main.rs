//! `psgdet` — synthesize, preprocess, train, detect, evaluate and sweep.
//!
//! Anything that affects numerics lives in config files; flags carry only
//! paths, split selection and verbosity-level choices.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use psgdet::manifest::Split;
use psgdet::runner::{self, RunConfig, SynthCorpusSpec};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "psgdet", version, about = "Single-shot detection of discrete sleep events")]
struct Cli {
    /// cap on worker threads (defaults to the core count)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CacheDirArg {
    /// preprocessed-recording cache (falls back to $PSGDET_CACHE_DIR)
    #[arg(long, env = "PSGDET_CACHE_DIR")]
    cache_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic EDF + annotation corpus
    Synth {
        /// corpus spec JSON (seed, split sizes, signal parameters)
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Resample, filter and normalize every record of a dataset manifest
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheDirArg,
        /// montage/alias JSON; the built-in PSG montage when omitted
        #[arg(long)]
        montage: Option<PathBuf>,
    },
    /// Train a detector from a run config file
    Train {
        /// run config JSON (seed, classes, architecture, optimizer, paths)
        #[arg(long)]
        config: PathBuf,
    },
    /// Write per-record event predictions as annotation CSVs
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheDirArg,
        #[arg(long, default_value = "test")]
        split: String,
        /// override the checkpoint's classification threshold
        #[arg(long)]
        theta_clf: Option<f64>,
        /// override the checkpoint's suppression threshold
        #[arg(long)]
        nms_iou: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score prediction CSVs against annotation CSVs
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheDirArg,
        #[arg(long, default_value = "test")]
        split: String,
        /// comma-separated class labels, e.g. LM or AR,LM
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = 0.1)]
        eval_iou: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// F1 surface over an (eval IoU, classification threshold) grid
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cache: CacheDirArg,
        #[arg(long, default_value = "test")]
        split: String,
        /// comma-separated IoU grid
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3, 0.4, 0.5])]
        iou_grid: Vec<f64>,
        /// comma-separated threshold grid
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        theta_grid: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        "test" => Ok(Split::Test),
        other => anyhow::bail!("unknown split {other:?} (expected train, eval or test)"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("worker pool")?;
    }

    match cli.command {
        Command::Synth { spec, out_dir } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let corpus: SynthCorpusSpec =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            let manifest = runner::run_synth(&corpus, &out_dir)?;
            println!(
                "wrote {} records to {}",
                manifest.records.len(),
                out_dir.display()
            );
        }
        Command::Preprocess {
            manifest,
            cache,
            montage,
        } => {
            runner::run_preprocess(&manifest, &cache.cache_dir, montage.as_deref())?;
            println!("cache ready in {}", cache.cache_dir.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let summary = runner::run_train(&cfg, |e| {
                println!(
                    "epoch {:>3}: train {:.4}  eval {:.4}  lr {:.2e}  ({:.1}s)",
                    e.epoch, e.train_loss, e.eval_loss, e.lr, e.seconds
                );
            })?;
            println!(
                "best eval loss {:.4} at epoch {} ({:?}); checkpoint {}",
                summary.record.best_eval_loss,
                summary.record.best_epoch,
                summary.record.stop_reason,
                summary.checkpoint.display()
            );
        }
        Command::Detect {
            checkpoint,
            manifest,
            cache,
            split,
            theta_clf,
            nms_iou,
            out_dir,
        } => {
            let out = runner::run_detect(
                &checkpoint,
                &manifest,
                &cache.cache_dir,
                parse_split(&split)?,
                theta_clf,
                nms_iou,
                &out_dir,
            )?;
            let total: usize = out.per_record.iter().map(|(_, c)| c.len()).sum();
            println!(
                "{} events across {} records -> {}",
                total,
                out.per_record.len(),
                out_dir.display()
            );
        }
        Command::Evaluate {
            pred_dir,
            manifest,
            cache,
            split,
            classes,
            eval_iou,
            out_dir,
        } => {
            anyhow::ensure!(!classes.is_empty(), "--classes must list at least one class");
            let out = runner::run_evaluate(
                &pred_dir,
                &manifest,
                &cache.cache_dir,
                parse_split(&split)?,
                &classes,
                eval_iou,
                &out_dir,
            )?;
            for (label, s) in &out.summaries {
                println!(
                    "{label}: F1 {:.3} +/- {:.3}  Pr {:.3} +/- {:.3}  Re {:.3} +/- {:.3}  ({} records)",
                    s.f1_mean, s.f1_std, s.precision_mean, s.precision_std, s.recall_mean,
                    s.recall_std, s.records
                );
            }
        }
        Command::Sweep {
            checkpoint,
            manifest,
            cache,
            split,
            iou_grid,
            theta_grid,
            out_dir,
        } => {
            let out = runner::run_sweep(
                &checkpoint,
                &manifest,
                &cache.cache_dir,
                parse_split(&split)?,
                &iou_grid,
                &theta_grid,
                &out_dir,
            )?;
            for (label, points) in &out.surfaces {
                if let Some(best) = psgdet::eval::sweep_argmax(points) {
                    println!(
                        "{label}: best F1 {:.3} at IoU {} theta {}",
                        best.f1, best.eval_iou, best.theta
                    );
                }
            }
        }
    }
    Ok(())
}
