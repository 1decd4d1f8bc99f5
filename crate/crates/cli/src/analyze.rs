//! `evolve analyze`: jump tables, neighborhood change curves, sigmoid
//! trajectories and class-representative similarity, all on a trained
//! per-position model.

use std::collections::HashSet;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;

use evolve_core::cohort::class_name;
use evolve_core::labels::LabelVector;
use evolve_core::model::{InputSequence, Model, PredictionSeries};
use evolve_core::rng::rng_for;
use evolve_core::trajectory::{
    build_age_embeddings, calibrate_jumps, class_representative_similarity, cohort_change_curve,
    detect_jumps, rate_of_change, sigmoid_trajectory, AgeEmbeddingMap, PersonPredictions,
};
use evolve_core::TrainFloat;

use crate::output::{ensure_dir, run_config_sibling, write_csv, write_run_config};
use crate::pipeline::{require_evolve, split_sequences, LoadedData, SplitSequences};
use crate::{validation_err, CmdError, CmdResult, IntoCmd};

const REFERENCE_SAMPLE_STREAM: u64 = 100;

// ── jumps ───────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct JumpsArgs {
    #[command(flatten)]
    common: crate::DataModelArgs,
    /// Directory for jumps.csv / thresholds.csv / run_config.json.
    #[arg(long)]
    out_dir: PathBuf,
}

fn forward_split(
    model: &Model<TrainFloat>,
    seqs: &SplitSequences,
) -> Result<Vec<PredictionSeries<TrainFloat>>, CmdError> {
    let results: Vec<Result<PredictionSeries<TrainFloat>, CmdError>> = seqs
        .sequences
        .par_iter()
        .map(|seq| model.forward(seq).or_runtime())
        .collect();
    results.into_iter().collect()
}

pub fn run_jumps(args: JumpsArgs) -> CmdResult {
    let data = LoadedData::load(&args.common.data, &args.common.splits)?;
    let model = require_evolve(&args.common.ckpt)?;
    let c = model.config().n_classes;

    // calibrate on the validation split, detect on the test split
    let valid = split_sequences(&data, "valid", model.config())?;
    let valid_series = forward_split(&model, &valid)?;
    let pairs: Vec<(&PredictionSeries<TrainFloat>, &LabelVector)> =
        valid_series.iter().zip(valid.labels.iter()).collect();
    let thresholds = calibrate_jumps(&pairs).or_runtime()?;
    let undefined = thresholds.undefined_classes();
    if !undefined.is_empty() {
        eprintln!("note: no calibration positives for class(es) {undefined:?}");
    }

    let test = split_sequences(&data, "test", model.config())?;
    let test_series = forward_split(&model, &test)?;
    let inputs: Vec<PersonPredictions<'_, TrainFloat>> = test
        .person_ids
        .iter()
        .zip(test.sequences.iter())
        .zip(test_series.iter())
        .map(|((&person_id, seq), series)| PersonPredictions {
            person_id,
            seq,
            series,
        })
        .collect();
    let (events, table) = detect_jumps(&inputs, &thresholds).or_runtime()?;

    ensure_dir(&args.out_dir)?;
    let rows: Vec<String> = table
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.class,
                class_name(r.class, c),
                r.code,
                r.count,
                r.percent,
                r.mean_age,
                r.mean_t2f
            )
        })
        .collect();
    write_csv(
        &args.out_dir.join("jumps.csv"),
        "class,class_name,code,count,percent,mean_age,mean_t2f",
        &rows,
    )?;
    let trows: Vec<String> = (0..c)
        .map(|class| {
            format!(
                "{},{},{},{}",
                class,
                class_name(class, c),
                crate::output::opt_cell(thresholds.threshold(class)),
                thresholds.sample_count[class]
            )
        })
        .collect();
    write_csv(
        &args.out_dir.join("thresholds.csv"),
        "class,class_name,threshold,samples",
        &trows,
    )?;
    write_run_config(
        &args.out_dir.join("run_config.json"),
        "analyze jumps",
        args.common.seed,
        serde_json::json!({
            "ckpt": args.common.ckpt.display().to_string(),
            "data": args.common.data.display().to_string(),
            "detected_events": events.len(),
        }),
    )?;
    println!(
        "{} jump event(s) over {} test person(s); tables in {}",
        events.len(),
        test.person_ids.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ── shared embedding plumbing ───────────────────────────────────────────

fn age_maps(
    model: &Model<TrainFloat>,
    seqs: &SplitSequences,
) -> Result<Vec<AgeEmbeddingMap<TrainFloat>>, CmdError> {
    let results: Vec<Result<AgeEmbeddingMap<TrainFloat>, CmdError>> = seqs
        .person_ids
        .par_iter()
        .zip(seqs.sequences.par_iter())
        .map(|(&id, seq)| {
            let states = model.hidden_states(seq).or_runtime()?;
            build_age_embeddings(id, seq, &states).or_runtime()
        })
        .collect();
    results.into_iter().collect()
}

/// Deterministic subsample of reference ids.
fn sample_ids(ids: &[u64], sample: usize, seed: u64) -> Vec<u64> {
    if sample == 0 || sample >= ids.len() {
        return ids.to_vec();
    }
    let mut shuffled = ids.to_vec();
    rand::seq::SliceRandom::shuffle(
        &mut shuffled[..],
        &mut rng_for(seed, REFERENCE_SAMPLE_STREAM, 0),
    );
    shuffled.truncate(sample);
    shuffled.sort_unstable();
    shuffled
}

fn reference_maps(
    data: &LoadedData,
    model: &Model<TrainFloat>,
    reference_split: &str,
    exclude: &HashSet<u64>,
    sample: usize,
    seed: u64,
) -> Result<(Vec<AgeEmbeddingMap<TrainFloat>>, Vec<LabelVector>), CmdError> {
    let ids: Vec<u64> = data
        .split_ids(reference_split)?
        .iter()
        .copied()
        .filter(|id| !exclude.contains(id))
        .collect();
    let ids = sample_ids(&ids, sample, seed);
    let persons = data.select(&ids)?;
    let (labeled, _) = crate::pipeline::build_labeled(&persons, model.config(), &data.manifest)?;
    let seqs = SplitSequences {
        person_ids: labeled.iter().map(|l| l.person_id).collect(),
        sequences: labeled.iter().map(|l| l.seq.clone()).collect(),
        labels: labeled.into_iter().map(|l| l.labels).collect(),
    };
    let maps = age_maps(model, &seqs)?;
    Ok((maps, seqs.labels))
}

fn parse_ids(ids: &Option<String>, ids_file: &Option<PathBuf>) -> Result<Vec<u64>, CmdError> {
    let mut out = Vec::new();
    if let Some(list) = ids {
        for part in list.split(',') {
            out.push(
                part.trim()
                    .parse::<u64>()
                    .map_err(|_| CmdError::Validation(anyhow::anyhow!("bad id '{part}'")))?,
            );
        }
    }
    if let Some(path) = ids_file {
        let body = std::fs::read_to_string(path).or_validation()?;
        for line in body.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            out.push(
                line.parse::<u64>()
                    .map_err(|_| CmdError::Validation(anyhow::anyhow!("bad id '{line}'")))?,
            );
        }
    }
    if out.is_empty() {
        return validation_err("no target persons given (--ids or --ids-file)");
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

// ── change-curve ────────────────────────────────────────────────────────

#[derive(Args)]
pub struct ChangeCurveArgs {
    #[command(flatten)]
    common: crate::DataModelArgs,
    /// Comma-separated target person ids.
    #[arg(long)]
    ids: Option<String>,
    /// File with one target person id per line.
    #[arg(long)]
    ids_file: Option<PathBuf>,
    /// Neighborhood size (clamped to the available pool).
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// Split providing the reference pool.
    #[arg(long, default_value = "train")]
    reference_split: String,
    /// Cap on reference persons (0 = all).
    #[arg(long, default_value_t = 4000)]
    reference_sample: usize,
    #[arg(long)]
    min_age: Option<usize>,
    #[arg(long)]
    max_age: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

pub fn run_change_curve(args: ChangeCurveArgs) -> CmdResult {
    let data = LoadedData::load(&args.common.data, &args.common.splits)?;
    let model = require_evolve(&args.common.ckpt)?;
    let ids = parse_ids(&args.ids, &args.ids_file)?;
    let group_persons = data.select(&ids)?;
    let (labeled, _) = crate::pipeline::build_labeled(&group_persons, model.config(), &data.manifest)?;
    let group_seqs = SplitSequences {
        person_ids: labeled.iter().map(|l| l.person_id).collect(),
        sequences: labeled.iter().map(|l| l.seq.clone()).collect(),
        labels: labeled.into_iter().map(|l| l.labels).collect(),
    };
    let group_maps = age_maps(&model, &group_seqs)?;

    let exclude: HashSet<u64> = ids.iter().copied().collect();
    let (refs, _) = reference_maps(
        &data,
        &model,
        &args.reference_split,
        &exclude,
        args.reference_sample,
        args.common.seed,
    )?;
    if args.k > refs.len() {
        eprintln!(
            "note: k={} exceeds the reference pool ({}); neighborhoods are clamped",
            args.k,
            refs.len()
        );
    }

    let lo = args
        .min_age
        .unwrap_or_else(|| group_maps.iter().map(|m| m.first_age() + 1).min().unwrap_or(1));
    let hi = args
        .max_age
        .unwrap_or_else(|| group_maps.iter().map(|m| m.last_age()).max().unwrap_or(1));
    let group_refs: Vec<&AgeEmbeddingMap<TrainFloat>> = group_maps.iter().collect();
    let (curve, skipped) =
        cohort_change_curve(&group_refs, lo..=hi, args.k, &refs).or_runtime()?;
    if !skipped.is_empty() {
        eprintln!("note: no group member admits ages {skipped:?}; omitted");
    }

    let rows: Vec<String> = curve
        .iter()
        .map(|p| format!("{},{},{}", p.age, p.mean_rate, p.n))
        .collect();
    write_csv(&args.out, "age,mean_rate,n", &rows)?;
    write_run_config(
        &run_config_sibling(&args.out),
        "analyze change-curve",
        args.common.seed,
        serde_json::json!({
            "ckpt": args.common.ckpt.display().to_string(),
            "group_size": ids.len(),
            "k": args.k,
            "reference_split": args.reference_split,
            "reference_sample": args.reference_sample,
            "ages": [lo, hi],
        }),
    )?;
    println!("change curve over {} age(s) -> {}", curve.len(), args.out.display());
    Ok(())
}

// ── trajectory ──────────────────────────────────────────────────────────

#[derive(Args)]
pub struct TrajectoryArgs {
    #[command(flatten)]
    common: crate::DataModelArgs,
    /// Target person id.
    #[arg(long)]
    person: u64,
    /// Neighborhood size for the change-rate dots.
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long, default_value = "train")]
    reference_split: String,
    #[arg(long, default_value_t = 4000)]
    reference_sample: usize,
    /// Skip the neighborhood change-rate column.
    #[arg(long, default_value_t = false)]
    no_change_rate: bool,
    #[arg(long)]
    out: PathBuf,
}

fn person_sequence(
    data: &LoadedData,
    model: &Model<TrainFloat>,
    person: u64,
) -> Result<InputSequence, CmdError> {
    let record = data.person(person)?;
    let (labeled, _) =
        crate::pipeline::build_labeled(&[record], model.config(), &data.manifest)?;
    Ok(labeled.into_iter().next().expect("one person").seq)
}

pub fn run_trajectory(args: TrajectoryArgs) -> CmdResult {
    let data = LoadedData::load(&args.common.data, &args.common.splits)?;
    let model = require_evolve(&args.common.ckpt)?;
    let c = model.config().n_classes;
    let seq = person_sequence(&data, &model, args.person)?;
    let series = model.forward(&seq).or_runtime()?;
    let traj = sigmoid_trajectory(&seq, &series).or_runtime()?;

    let change_rates: Vec<Option<f64>> = if args.no_change_rate {
        vec![None; traj.len()]
    } else {
        let states = model.hidden_states(&seq).or_runtime()?;
        let target = build_age_embeddings(args.person, &seq, &states).or_runtime()?;
        let exclude: HashSet<u64> = [args.person].into_iter().collect();
        let (refs, _) = reference_maps(
            &data,
            &model,
            &args.reference_split,
            &exclude,
            args.reference_sample,
            args.common.seed,
        )?;
        if args.k > refs.len() {
            eprintln!(
                "note: k={} exceeds the reference pool ({}); neighborhoods are clamped",
                args.k,
                refs.len()
            );
        }
        traj.iter()
            .map(|&(age, _)| rate_of_change(&target, age, args.k, &refs).ok())
            .collect()
    };

    let mut header = String::from("age");
    for class in 0..c {
        header.push(',');
        header.push_str(&class_name(class, c));
    }
    header.push_str(",rate_of_change");
    let rows: Vec<String> = traj
        .iter()
        .zip(change_rates.iter())
        .map(|(&(age, ref sig), r)| {
            let mut row = age.to_string();
            for &v in sig.iter() {
                row.push(',');
                row.push_str(&(v as f64).to_string());
            }
            row.push(',');
            row.push_str(&crate::output::opt_cell(*r));
            row
        })
        .collect();
    write_csv(&args.out, &header, &rows)?;
    write_run_config(
        &run_config_sibling(&args.out),
        "analyze trajectory",
        args.common.seed,
        serde_json::json!({
            "ckpt": args.common.ckpt.display().to_string(),
            "person": args.person,
            "k": args.k,
            "ages": traj.len(),
        }),
    )?;
    println!(
        "trajectory over {} age(s) for person {} -> {}",
        traj.len(),
        args.person,
        args.out.display()
    );
    Ok(())
}

// ── class-sim ───────────────────────────────────────────────────────────

#[derive(Args)]
pub struct ClassSimArgs {
    #[command(flatten)]
    common: crate::DataModelArgs,
    #[arg(long)]
    person: u64,
    /// Representatives per class.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value = "train")]
    reference_split: String,
    #[arg(long, default_value_t = 4000)]
    reference_sample: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn run_class_sim(args: ClassSimArgs) -> CmdResult {
    let data = LoadedData::load(&args.common.data, &args.common.splits)?;
    let model = require_evolve(&args.common.ckpt)?;
    let c = model.config().n_classes;
    let seq = person_sequence(&data, &model, args.person)?;
    let states = model.hidden_states(&seq).or_runtime()?;
    let target = build_age_embeddings(args.person, &seq, &states).or_runtime()?;

    let exclude: HashSet<u64> = [args.person].into_iter().collect();
    let (maps, labels) = reference_maps(
        &data,
        &model,
        &args.reference_split,
        &exclude,
        args.reference_sample,
        args.common.seed,
    )?;
    let refs: Vec<(AgeEmbeddingMap<TrainFloat>, LabelVector)> =
        maps.into_iter().zip(labels).collect();
    let curves = class_representative_similarity(&target, &refs, args.k).or_runtime()?;

    let mut short = 0usize;
    let mut header = String::from("age");
    for class in 0..c {
        header.push(',');
        header.push_str(&class_name(class, c));
    }
    let rows: Vec<String> = curves
        .ages
        .iter()
        .enumerate()
        .map(|(idx, age)| {
            let mut row = age.to_string();
            for class in 0..c {
                row.push(',');
                if let Some(cell) = curves.cell(idx, class) {
                    if cell.n_used < args.k {
                        short += 1;
                    }
                    row.push_str(&cell.similarity.to_string());
                }
            }
            row
        })
        .collect();
    if short > 0 {
        eprintln!("note: {short} cell(s) used fewer than k={} representatives", args.k);
    }
    write_csv(&args.out, &header, &rows)?;
    write_run_config(
        &run_config_sibling(&args.out),
        "analyze class-sim",
        args.common.seed,
        serde_json::json!({
            "ckpt": args.common.ckpt.display().to_string(),
            "person": args.person,
            "k": args.k,
            "reference_split": args.reference_split,
            "reference_sample": args.reference_sample,
        }),
    )?;
    println!(
        "class similarity over {} age(s) for person {} -> {}",
        curves.ages.len(),
        args.person,
        args.out.display()
    );
    Ok(())
}
