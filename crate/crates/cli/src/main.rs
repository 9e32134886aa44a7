//! `mgsv`: generate synthetic data, train, evaluate and predict.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mgsv::data::{read_features, synth_generate, Dataset, FeatureStore, SynthConfig};
use mgsv::metrics::EvalMode;
use mgsv::train::{evaluate, predict, train, Checkpoint, RunOptions, TrainConfig};
use mgsv::{Error, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(name = "mgsv", version, about = "Music grounding by short video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with planted video-music correlations.
    GenSynth {
        /// JSON synthetic-data configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split, selecting the best checkpoint on the val split.
    Train {
        /// Dataset root.
        #[arg(long, env = "MGSV_DATA_ROOT")]
        data: PathBuf,
        /// JSON training configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimiser steps in total.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on a split and write a report and prediction file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root.
        #[arg(long, env = "MGSV_DATA_ROOT")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Msg)]
        mode: Mode,
        /// Report JSON path.
        #[arg(long)]
        report: PathBuf,
        /// Prediction file path; defaults to the report path with a `.predictions.jsonl` suffix.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Tracks localised per query in music-set mode.
        #[arg(long, default_value_t = 100)]
        detect_top: usize,
    },
    /// Rank candidate tracks for one video and localise a moment in each.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Video feature file; its stem is the query id.
        #[arg(long)]
        video: PathBuf,
        /// Track feature files; their stems are the track ids.
        #[arg(long, num_args = 1.., required = true)]
        tracks: Vec<PathBuf>,
        /// Write the prediction record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Smg,
    Msg,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_string).ok_or_else(|| Error::Data(format!("{}: no file stem", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { config, out } => {
            let cfg: SynthConfig = read_config(config.as_deref())?;
            let ds = synth_generate(&cfg)?;
            ds.write(&out)?;
            log::info!(
                "wrote {} train / {} val / {} test pairs over {} tracks to {}",
                ds.train.entries.len(),
                ds.val.entries.len(),
                ds.test.entries.len(),
                ds.features.tracks.len(),
                out.display()
            );
        }
        Command::Train { data, config, out, resume, stop_after } => {
            let ds = Dataset::open(&data)?;
            let features = FeatureStore::load(&data, &[&ds.train, &ds.val])?;
            let resume = match resume {
                Some(p) => {
                    if config.is_some() {
                        return Err(Error::Config("--config and --resume are mutually exclusive".into()));
                    }
                    Some(Checkpoint::load(&p)?)
                }
                None => None,
            };
            let cfg: TrainConfig = read_config(config.as_deref())?;
            cfg.validate()?;
            let summary = train(cfg, &ds.train, &ds.val, &features, &out, RunOptions { resume, stop_after })?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Eval { ckpt, data, mode, report, predictions, split, detect_top } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = Dataset::open(&data)?;
            let manifest = ds.split(&split)?;
            let features = FeatureStore::load(&data, &[manifest])?;
            let mode = match mode {
                Mode::Smg => EvalMode::Smg,
                Mode::Msg => EvalMode::Msg,
            };
            let eval = evaluate(&ckpt, manifest, &features, mode, detect_top)?;
            let pred_path = predictions.unwrap_or_else(|| report.with_extension("predictions.jsonl"));
            write_file(&report, &eval.report_json()?)?;
            write_file(&pred_path, &eval.predictions_jsonl()?)?;
            let r = &eval.report;
            log::info!("{} queries, {} candidates, mIoU {:.4}", r.queries, r.candidates, r.miou);
            for (k, v) in &r.recall {
                log::info!("R@{k} {v:.2}");
            }
            for (k, v) in &r.moment_recall {
                match v {
                    Some(v) => log::info!("MoR@{k} {v:.2}"),
                    None => log::info!("MoR@{k} n/a (raise --detect-top)"),
                }
            }
        }
        Command::Predict { ckpt, video, tracks, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let query = read_features(&video)?;
            let cands = tracks.iter().map(|p| Ok((stem(p)?, read_features(p)?))).collect::<Result<Vec<_>>>()?;
            let pred = predict(&ckpt, &stem(&video)?, &query, &cands)?;
            let line = serde_json::to_string(&pred)? + "\n";
            match out {
                Some(p) => write_file(&p, &line)?,
                None => print!("{line}"),
            }
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
