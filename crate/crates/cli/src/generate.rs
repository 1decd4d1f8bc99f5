//! `evolve generate`: synthetic cohort plus split manifest.

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Deserialize;

use evolve_core::cohort::{generate, save_jsonl, split, CohortConfig};

use crate::output::{run_config_sibling, write_run_config};
use crate::pipeline::SplitManifest;
use crate::{validation_err, CmdResult, IntoCmd};

#[derive(Args)]
pub struct GenerateArgs {
    /// Cohort config (JSON). May carry a "seed" field.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset path (JSONL); the split manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Run seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the cohort size.
    #[arg(long)]
    n_persons: Option<usize>,
}

#[derive(Deserialize)]
struct GenerateFile {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(flatten)]
    cohort: CohortConfig,
}

pub fn run(args: GenerateArgs) -> CmdResult {
    let raw = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))
        .or_validation()?;
    let file: GenerateFile = serde_json::from_str(&raw)
        .with_context(|| format!("parsing {}", args.config.display()))
        .or_validation()?;
    let mut cohort = file.cohort;
    if let Some(n) = args.n_persons {
        cohort.n_persons = n;
    }
    let Some(seed) = args.seed.or(file.seed) else {
        return validation_err("a seed is required (--seed or a \"seed\" config field)");
    };
    cohort.validate().or_validation()?;

    let dataset = generate(&cohort, seed).or_validation()?;
    let split = split(&dataset, seed).or_validation()?;
    save_jsonl(&dataset, &args.out).or_runtime()?;

    let manifest = SplitManifest {
        forecast_start_year: cohort.forecast_start_year,
        buffer_years: cohort.buffer_years,
        n_classes: cohort.n_classes,
        vocab_size: cohort.vocab_size(),
        split,
    };
    let manifest_path = args.out.with_extension("splits.json");
    let body = serde_json::to_string_pretty(&manifest).or_runtime()?;
    std::fs::write(&manifest_path, body + "\n").or_runtime()?;

    write_run_config(
        &run_config_sibling(&args.out),
        "generate",
        seed,
        serde_json::json!({
            "config": args.config.display().to_string(),
            "out": args.out.display().to_string(),
            "splits": manifest_path.display().to_string(),
            "cohort": serde_json::to_value(&cohort).or_runtime()?,
        }),
    )?;
    println!(
        "generated {} persons -> {} (splits {})",
        dataset.len(),
        args.out.display(),
        manifest_path.display()
    );
    Ok(())
}
