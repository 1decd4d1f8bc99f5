//! `evolve train`: transformer variants and the count-vector baseline.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Deserialize;

use evolve_core::logreg::{featurize, LogRegModel, PenaltyConfig};
use evolve_core::model::{save_checkpoint, Mode, Model, ModelConfig};
use evolve_core::train::{
    fit_with, load_fit_state, save_fit_state, write_history_csv, EpochStats, FitState,
    HookAction, TrainConfig,
};
use evolve_core::TrainFloat;

use crate::output::{run_config_sibling, write_run_config};
use crate::pipeline::{build_labeled, report_clips, LoadedData};
use crate::{validation_err, CmdResult, IntoCmd};

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Split manifest from `generate`.
    #[arg(long)]
    splits: PathBuf,
    /// Model flavor to train.
    #[arg(long, value_parser = ["evolve", "cls", "logreg"])]
    mode: String,
    /// Model + training config (JSON with "model" and "train" sections).
    #[arg(long)]
    config: PathBuf,
    /// Output path: checkpoint for transformers, JSON for the baseline.
    #[arg(long)]
    out: PathBuf,
    /// History CSV path (default: `<out stem>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Continue from `<out>.last` and `<out>.state`.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Terminate cleanly after this many epochs (state stays resumable);
    /// mainly for interruption testing.
    #[arg(long)]
    stop_after_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    none_downsample_rate: Option<f64>,
}

#[derive(Deserialize)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    #[serde(default)]
    logreg: Option<PenaltyConfig>,
}

fn last_path(out: &Path) -> PathBuf {
    out.with_extension("last")
}

fn state_path(out: &Path) -> PathBuf {
    out.with_extension("state")
}

pub fn run(args: TrainArgs) -> CmdResult {
    let data = LoadedData::load(&args.data, &args.splits)?;

    // the file's model section may omit dataset-derived sizes
    let raw = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))
        .or_validation()?;
    let mut value: serde_json::Value = serde_json::from_str(&raw)
        .with_context(|| format!("parsing {}", args.config.display()))
        .or_validation()?;
    let seed_in_file = value
        .get("train")
        .and_then(|t| t.get("seed"))
        .is_some();
    if let Some(model) = value.get_mut("model").and_then(|m| m.as_object_mut()) {
        model
            .entry("vocab_size")
            .or_insert(serde_json::json!(data.manifest.vocab_size));
        model
            .entry("n_classes")
            .or_insert(serde_json::json!(data.manifest.n_classes));
    }
    let file: TrainFile = serde_json::from_value(value)
        .with_context(|| format!("parsing {}", args.config.display()))
        .or_validation()?;
    let mut model_cfg = file.model;
    let mut train_cfg = file.train;

    if args.seed.is_none() && !seed_in_file {
        return validation_err("a seed is required (--seed or train.seed in the config)");
    }
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    if let Some(v) = args.lr {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        train_cfg.max_epochs = v;
    }
    if let Some(v) = args.patience {
        train_cfg.early_stop_patience = v;
    }
    if let Some(v) = args.dropout {
        model_cfg.dropout = v;
    }
    if let Some(v) = args.none_downsample_rate {
        train_cfg.none_downsample_rate = v;
    }
    if model_cfg.n_classes != data.manifest.n_classes {
        return validation_err(format!(
            "model expects {} classes but the dataset has {}",
            model_cfg.n_classes, data.manifest.n_classes
        ));
    }

    let run_params = serde_json::json!({
        "data": args.data.display().to_string(),
        "splits": args.splits.display().to_string(),
        "mode": args.mode,
        "out": args.out.display().to_string(),
        "model": serde_json::to_value(&model_cfg).or_runtime()?,
        "train": serde_json::to_value(&train_cfg).or_runtime()?,
        "resume": args.resume,
    });

    match args.mode.as_str() {
        "logreg" => {
            let penalty = file.logreg.unwrap_or_default();
            run_logreg(&data, penalty, &args, train_cfg.seed, run_params)
        }
        mode => {
            model_cfg.mode = if mode == "cls" { Mode::Cls } else { Mode::Evolve };
            run_transformer(&data, model_cfg, train_cfg, &args, run_params)
        }
    }
}

fn run_logreg(
    data: &LoadedData,
    penalty: PenaltyConfig,
    args: &TrainArgs,
    seed: u64,
    run_params: serde_json::Value,
) -> CmdResult {
    let train_persons = data.select(&data.manifest.split.train)?;
    let vocab = data.manifest.vocab_size;
    let features: Vec<_> = train_persons
        .iter()
        .map(|p| featurize(p, data.manifest.forecast_start_year, vocab))
        .collect();
    let labels: Vec<_> = train_persons.iter().map(|p| p.labels.clone()).collect();
    let model = LogRegModel::fit_ovr(&features, &labels, penalty).or_runtime()?;
    let skipped = model.skipped_classes();
    if !skipped.is_empty() {
        eprintln!("note: classes without both outcomes were skipped: {skipped:?}");
    }
    let unconverged = model.unconverged_classes();
    if !unconverged.is_empty() {
        eprintln!(
            "warning: classes {unconverged:?} did not reach tolerance; best iterates kept"
        );
    }
    model.save_json(&args.out).or_runtime()?;
    write_run_config(&run_config_sibling(&args.out), "train", seed, run_params)?;
    println!("baseline model written to {}", args.out.display());
    Ok(())
}

fn run_transformer(
    data: &LoadedData,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    args: &TrainArgs,
    run_params: serde_json::Value,
) -> CmdResult {
    let train_persons = data.select(&data.manifest.split.train)?;
    let valid_persons = data.select(&data.manifest.split.valid)?;
    let (train_set, clips) = build_labeled(&train_persons, &model_cfg, &data.manifest)?;
    report_clips(&clips);
    let (valid_set, _) = build_labeled(&valid_persons, &model_cfg, &data.manifest)?;

    let (mut model, resume_state) = if args.resume {
        let model: Model<TrainFloat> =
            evolve_core::model::load_checkpoint(&last_path(&args.out))
                .context("loading resume checkpoint")
                .or_validation()?;
        if model.config() != &model_cfg {
            return validation_err(
                "resume checkpoint config differs from the requested config",
            );
        }
        let state = load_fit_state::<TrainFloat>(&state_path(&args.out), &model)
            .context("loading resume state")
            .or_validation()?;
        (model, Some(state))
    } else {
        (
            Model::<TrainFloat>::new(model_cfg.clone(), train_cfg.seed).or_validation()?,
            None,
        )
    };

    let out = args.out.clone();
    let stop_after = args.stop_after_epoch;
    let mut hook = |m: &Model<TrainFloat>,
                    state: &FitState<TrainFloat>,
                    stats: &EpochStats,
                    improved: bool|
     -> Result<HookAction, String> {
        println!(
            "epoch {:>3}  train {:.5}  valid {:.5}  lr {:.3e}{}",
            stats.epoch,
            stats.train_loss,
            stats.valid_loss,
            stats.lr,
            if improved { "  *" } else { "" }
        );
        save_checkpoint(m, &last_path(&out)).map_err(|e| e.to_string())?;
        save_fit_state(state, &state_path(&out)).map_err(|e| e.to_string())?;
        if improved {
            save_checkpoint(m, &out).map_err(|e| e.to_string())?;
        }
        if stop_after.is_some_and(|n| stats.epoch + 1 >= n) {
            return Ok(HookAction::Stop);
        }
        Ok(HookAction::Continue)
    };

    let result = fit_with(
        &mut model,
        &train_set,
        &valid_set,
        &train_cfg,
        resume_state,
        Some(&mut hook),
    )
    .or_runtime()?;

    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| args.out.with_extension("history.csv"));
    write_history_csv(&history_path, &result.history).or_runtime()?;
    write_run_config(
        &run_config_sibling(&args.out),
        "train",
        train_cfg.seed,
        run_params,
    )?;
    println!(
        "best validation loss {:.5} at epoch {} ({} epoch(s) run{}); checkpoint {}",
        result.best_valid_loss,
        result.best_epoch,
        result.epochs_run,
        if result.stopped_early {
            ", stopped early"
        } else {
            ""
        },
        args.out.display()
    );
    Ok(())
}
