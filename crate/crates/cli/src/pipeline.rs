//! Shared plumbing: split manifests, dataset loading, sequence building
//! and model scoring.

use std::collections::HashMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use evolve_core::cohort::{
    load_jsonl, to_input_sequence, ClipStats, DatasetSplit, PersonRecord, SequenceLimits,
};
use evolve_core::labels::LabelVector;
use evolve_core::logreg::{featurize, LogRegModel};
use evolve_core::model::{
    load_checkpoint, load_checkpoint_config, InputSequence, Mode, Model, ModelConfig,
};
use evolve_core::train::LabeledSequence;
use evolve_core::TrainFloat;

use crate::{validation_err, CmdError, IntoCmd};

/// Split manifest written by `generate`: the person-id partition plus the
/// dataset facts every later stage needs.
#[derive(Serialize, Deserialize)]
pub struct SplitManifest {
    pub forecast_start_year: f64,
    pub buffer_years: f64,
    pub n_classes: usize,
    pub vocab_size: usize,
    #[serde(flatten)]
    pub split: DatasetSplit,
}

pub struct LoadedData {
    pub persons: Vec<PersonRecord>,
    pub manifest: SplitManifest,
    by_id: HashMap<u64, usize>,
}

impl LoadedData {
    pub fn load(data: &Path, splits: &Path) -> Result<Self, CmdError> {
        let manifest: SplitManifest = serde_json::from_reader(
            std::fs::File::open(splits)
                .with_context(|| format!("opening {}", splits.display()))
                .or_validation()?,
        )
        .with_context(|| format!("parsing {}", splits.display()))
        .or_validation()?;
        let (persons, report) = load_jsonl(data, manifest.n_classes).or_validation()?;
        if report.unknown_fields > 0 {
            eprintln!(
                "note: ignored {} unknown field(s) in {}",
                report.unknown_fields,
                data.display()
            );
        }
        let by_id = persons
            .iter()
            .enumerate()
            .map(|(i, p)| (p.person_id, i))
            .collect();
        Ok(LoadedData {
            persons,
            manifest,
            by_id,
        })
    }

    pub fn person(&self, id: u64) -> Result<&PersonRecord, CmdError> {
        match self.by_id.get(&id) {
            Some(&i) => Ok(&self.persons[i]),
            None => validation_err(format!("person {id} not found in the dataset")),
        }
    }

    pub fn select(&self, ids: &[u64]) -> Result<Vec<&PersonRecord>, CmdError> {
        ids.iter().map(|&id| self.person(id)).collect()
    }

    pub fn split_ids(&self, which: &str) -> Result<&[u64], CmdError> {
        match which {
            "train" => Ok(&self.manifest.split.train),
            "valid" => Ok(&self.manifest.split.valid),
            "test" => Ok(&self.manifest.split.test),
            other => validation_err(format!("unknown split '{other}' (train|valid|test)")),
        }
    }
}

/// Convert persons into model inputs, inserting the reserved first-position
/// token in cls mode. Clip counts are aggregated.
pub fn build_labeled(
    persons: &[&PersonRecord],
    cfg: &ModelConfig,
    manifest: &SplitManifest,
) -> Result<(Vec<LabeledSequence>, ClipStats), CmdError> {
    let limits = SequenceLimits::from(cfg);
    let mut out = Vec::with_capacity(persons.len());
    let mut clips = ClipStats::default();
    for p in persons {
        let (seq, stats) = to_input_sequence(
            p,
            manifest.forecast_start_year,
            manifest.buffer_years,
            &limits,
        )
        .or_validation()?;
        clips.ages_clipped += stats.ages_clipped;
        clips.t2f_clipped += stats.t2f_clipped;
        let seq = match cfg.mode {
            Mode::Evolve => seq,
            Mode::Cls => seq.with_cls(cfg.cls_code_id(), cfg.max_seq_len),
        };
        out.push(LabeledSequence {
            person_id: p.person_id,
            seq,
            labels: p.labels.clone(),
        });
    }
    Ok((out, clips))
}

pub fn report_clips(clips: &ClipStats) {
    if clips.total() > 0 {
        eprintln!(
            "note: clamped {} age id(s) and {} t2f id(s) into table range",
            clips.ages_clipped, clips.t2f_clipped
        );
    }
}

/// A scoreable model: either transformer variant, or the count baseline.
pub enum AnyModel {
    Transformer(Box<Model<TrainFloat>>),
    LogReg(Box<LogRegModel>),
}

impl AnyModel {
    /// Sniff the checkpoint type by its magic bytes.
    pub fn load(path: &Path) -> Result<AnyModel, CmdError> {
        let head = {
            use std::io::Read;
            let mut f = std::fs::File::open(path)
                .with_context(|| format!("opening {}", path.display()))
                .or_validation()?;
            let mut buf = [0u8; 4];
            let n = f.read(&mut buf).or_runtime()?;
            buf[..n].to_vec()
        };
        if head == b"EVLV" {
            Ok(AnyModel::Transformer(Box::new(
                load_checkpoint::<TrainFloat>(path).or_validation()?,
            )))
        } else {
            Ok(AnyModel::LogReg(Box::new(
                LogRegModel::load_json(path)
                    .with_context(|| {
                        format!("{} is neither a checkpoint nor a baseline model", path.display())
                    })
                    .or_validation()?,
            )))
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            AnyModel::Transformer(m) => m.config().n_classes,
            AnyModel::LogReg(m) => m.n_classes,
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            AnyModel::Transformer(m) => match m.config().mode {
                Mode::Evolve => "evolve",
                Mode::Cls => "cls",
            },
            AnyModel::LogReg(_) => "logreg",
        }
    }
}

/// Require a per-position (causal) transformer checkpoint.
pub fn require_evolve(path: &Path) -> Result<Model<TrainFloat>, CmdError> {
    let cfg = load_checkpoint_config(path).or_validation()?;
    if cfg.mode != Mode::Evolve {
        return validation_err(
            "this analysis needs a per-position model (mode 'evolve'); the checkpoint is not one",
        );
    }
    load_checkpoint::<TrainFloat>(path).or_validation()
}

/// Full-history score rows for a set of persons: the last-position sigmoid
/// row for the per-position variant, the single row for the cls variant,
/// per-class probabilities for the baseline.
pub fn score_persons(
    model: &AnyModel,
    persons: &[&PersonRecord],
    manifest: &SplitManifest,
) -> Result<(Vec<f64>, Vec<bool>), CmdError> {
    use rayon::prelude::*;
    let c = model.n_classes();
    let scores: Vec<Vec<f64>> = match model {
        AnyModel::Transformer(m) => {
            let (labeled, clips) = build_labeled(persons, m.config(), manifest)?;
            report_clips(&clips);
            let rows: Vec<Result<Vec<f64>, CmdError>> = labeled
                .par_iter()
                .map(|item| {
                    let series = m.forward(&item.seq).or_runtime()?;
                    Ok(series.last_row().iter().map(|&v| v as f64).collect())
                })
                .collect();
            rows.into_iter().collect::<Result<_, _>>()?
        }
        AnyModel::LogReg(m) => persons
            .iter()
            .map(|p| {
                m.predict_proba(&featurize(p, manifest.forecast_start_year, m.vocab_size))
                    .or_runtime()
            })
            .collect::<Result<_, _>>()?,
    };
    let mut flat_scores = Vec::with_capacity(persons.len() * c);
    let mut flat_labels = Vec::with_capacity(persons.len() * c);
    for (p, row) in persons.iter().zip(scores) {
        if row.len() != c {
            return validation_err("model emitted an unexpected class count");
        }
        flat_scores.extend(row);
        flat_labels.extend(labels_as_bools(&p.labels, c)?);
    }
    Ok((flat_scores, flat_labels))
}

fn labels_as_bools(labels: &LabelVector, c: usize) -> Result<Vec<bool>, CmdError> {
    if labels.n_classes() != c {
        return validation_err(format!(
            "dataset has {} classes but the model expects {c} (config/checkpoint mismatch)",
            labels.n_classes()
        ));
    }
    Ok(labels.iter().collect())
}

/// Inference inputs plus kept metadata for one split of persons.
pub struct SplitSequences {
    pub person_ids: Vec<u64>,
    pub sequences: Vec<InputSequence>,
    pub labels: Vec<LabelVector>,
}

pub fn split_sequences(
    data: &LoadedData,
    which: &str,
    cfg: &ModelConfig,
) -> Result<SplitSequences, CmdError> {
    let persons = data.select(data.split_ids(which)?)?;
    let (labeled, clips) = build_labeled(&persons, cfg, &data.manifest)?;
    report_clips(&clips);
    Ok(SplitSequences {
        person_ids: labeled.iter().map(|l| l.person_id).collect(),
        sequences: labeled.iter().map(|l| l.seq.clone()).collect(),
        labels: labeled.into_iter().map(|l| l.labels).collect(),
    })
}
