//! `evolve evaluate`: full-history scoring plus metric tables with
//! bootstrap standard deviations.

use std::path::PathBuf;

use clap::Args;

use evolve_core::cohort::class_name;
use evolve_core::metrics::{
    auprc, auroc, bootstrap_std, per_class_auroc, per_class_prevalence, per_class_recall_at_k,
    recall_at_k, Averaging, MetricError, ScoreMatrix,
};

use crate::output::{ensure_dir, opt_cell, write_csv, write_run_config};
use crate::pipeline::{score_persons, AnyModel, LoadedData};
use crate::{CmdResult, IntoCmd};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Model to score: transformer checkpoint or baseline JSON.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    /// Which split to score.
    #[arg(long, default_value = "test")]
    split: String,
    /// Bootstrap iterations for standard deviations.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long)]
    seed: u64,
    /// Directory for metrics.csv / per_class.csv / run_config.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Row label in metrics.csv (default: the model flavor).
    #[arg(long)]
    model_name: Option<String>,
    /// Drop the none class from Recall@k ranking and accounting.
    #[arg(long, default_value_t = false)]
    exclude_none: bool,
    /// Top-k cutoff for recall.
    #[arg(long, default_value_t = 4)]
    recall_k: usize,
}

pub fn run(args: EvaluateArgs) -> CmdResult {
    let data = LoadedData::load(&args.data, &args.splits)?;
    let model = AnyModel::load(&args.ckpt)?;
    let persons = data.select(data.split_ids(&args.split)?)?;
    let n = persons.len();
    let c = model.n_classes();
    let (scores, labels) = score_persons(&model, &persons, &data.manifest)?;
    let matrix = ScoreMatrix::new(scores, labels, n, c).or_runtime()?;

    let k = args.recall_k;
    let name = args
        .model_name
        .clone()
        .unwrap_or_else(|| model.describe().to_string());

    type MetricFn<'a> = Box<dyn Fn(&ScoreMatrix) -> Result<f64, MetricError> + Sync + 'a>;
    let metric_fns: Vec<(&str, &str, MetricFn)> = vec![
        ("auroc", "micro", Box::new(|m: &ScoreMatrix| auroc(m, Averaging::Micro).map(|r| r.value))),
        ("auroc", "macro", Box::new(|m: &ScoreMatrix| auroc(m, Averaging::Macro).map(|r| r.value))),
        ("auprc", "micro", Box::new(|m: &ScoreMatrix| auprc(m, Averaging::Micro).map(|r| r.value))),
        ("auprc", "macro", Box::new(|m: &ScoreMatrix| auprc(m, Averaging::Macro).map(|r| r.value))),
        (
            "recall_at_k",
            "micro",
            Box::new(move |m: &ScoreMatrix| {
                recall_at_k(m, k, Averaging::Micro, &exclude_slice(args.exclude_none, c))
                    .map(|r| r.value)
            }),
        ),
        (
            "recall_at_k",
            "macro",
            Box::new(move |m: &ScoreMatrix| {
                recall_at_k(m, k, Averaging::Macro, &exclude_slice(args.exclude_none, c))
                    .map(|r| r.value)
            }),
        ),
    ];

    // point estimates on the full split plus bootstrap spread; the same
    // seed reuses identical resamples for every metric
    let mut cells: Vec<String> = vec![name.clone()];
    let mut header = String::from("model");
    let mut excluded_note: Vec<String> = Vec::new();
    for (metric, avg, f) in &metric_fns {
        header.push_str(&format!(",{metric}_{avg},{metric}_{avg}_std"));
        let point = f(&matrix).or_runtime()?;
        let boot = bootstrap_std(f, &matrix, args.bootstrap, args.seed).or_runtime()?;
        if boot.redraws > 0 {
            excluded_note.push(format!("{metric}_{avg}: {} redraw(s)", boot.redraws));
        }
        cells.push(point.to_string());
        cells.push(boot.std.to_string());
    }
    let macro_result = auroc(&matrix, Averaging::Macro).or_runtime()?;
    if !macro_result.excluded_classes.is_empty() {
        eprintln!(
            "note: macro averages exclude degenerate class(es) {:?}",
            macro_result.excluded_classes
        );
    }
    if !excluded_note.is_empty() {
        eprintln!("note: bootstrap {}", excluded_note.join(", "));
    }

    ensure_dir(&args.out_dir)?;
    write_csv(
        &args.out_dir.join("metrics.csv"),
        &header,
        &[cells.join(",")],
    )?;

    // per-class table: class, auroc, recall@k, prevalence
    let pc_auroc = per_class_auroc(&matrix);
    let pc_recall =
        per_class_recall_at_k(&matrix, k, &exclude_slice(args.exclude_none, c)).or_runtime()?;
    let prevalence = per_class_prevalence(&matrix);
    let rows: Vec<String> = (0..c)
        .map(|class| {
            format!(
                "{},{},{},{},{}",
                class,
                class_name(class, c),
                opt_cell(pc_auroc[class]),
                opt_cell(pc_recall[class]),
                prevalence[class]
            )
        })
        .collect();
    write_csv(
        &args.out_dir.join("per_class.csv"),
        &format!("class,name,auroc,recall_at_{k},prevalence"),
        &rows,
    )?;

    write_run_config(
        &args.out_dir.join("run_config.json"),
        "evaluate",
        args.seed,
        serde_json::json!({
            "ckpt": args.ckpt.display().to_string(),
            "data": args.data.display().to_string(),
            "split": args.split,
            "bootstrap": args.bootstrap,
            "model_name": name,
            "exclude_none": args.exclude_none,
            "recall_k": k,
            "n_scored": n,
        }),
    )?;
    println!(
        "evaluated {n} persons ({}); tables in {}",
        model.describe(),
        args.out_dir.display()
    );
    Ok(())
}

fn exclude_slice(exclude_none: bool, c: usize) -> Vec<usize> {
    if exclude_none {
        vec![c - 1]
    } else {
        vec![]
    }
}
