//! Synthetic longitudinal cohorts with planted hazard structure.
//!
//! Each person is a time-ordered stream of coded events over a historical
//! interval plus a fixed label vector describing first onsets in the
//! forecast interval. Class layout convention used across the crate:
//! indices `0..C-2` are diagnoses, `C-2` is death, `C-1` is none.
//!
//! The generative process plants recoverable signal: designated trigger
//! codes multiply the hazard of their mapped class, death hazard grows
//! exponentially with age, and persons draw most events from a small
//! personal code palette so embedding neighborhoods stay stable between
//! ages. An optional mid-life "shock" gives a burst of novel codes to a
//! subset of persons for change-rate experiments.

mod jsonl;
mod sequence;

pub use jsonl::{load_jsonl, save_jsonl, LoadReport};
pub use sequence::{to_input_sequence, ClipStats, SequenceLimits};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::LabelVector;
use crate::rng::{rng_for, stream};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort config: {0}")]
    Config(String),
    #[error("invalid person data: {0}")]
    Data(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One code source and how many distinct ids it contributes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodeTypeSpec {
    pub name: String,
    pub count: usize,
}

/// A code that, when planted in a person's history, multiplies the hazard
/// of one diagnosis class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub class: usize,
    pub code: usize,
    pub multiplier: f64,
    pub plant_prob: f64,
}

/// Burst of novel codes at a fixed age for a random subset of persons.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShockSpec {
    pub prob: f64,
    pub age: f64,
    pub n_codes: usize,
    pub codes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_persons: usize,
    /// Per-type code counts; the id space is their concatenation.
    #[serde(rename = "vocab")]
    pub code_types: Vec<CodeTypeSpec>,
    /// Diagnoses + death + none; must be at least 3.
    pub n_classes: usize,
    /// Maximum age at forecast start (years).
    #[serde(default = "default_history_years")]
    pub history_years: f64,
    #[serde(default = "default_min_age")]
    pub min_age_at_forecast: f64,
    #[serde(default = "default_forecast_years")]
    pub forecast_years: f64,
    /// Gap between the last admissible event and the forecast start.
    #[serde(default = "default_buffer_years")]
    pub buffer_years: f64,
    /// Calendar anchor for birth years.
    #[serde(default = "default_forecast_start_year")]
    pub forecast_start_year: f64,
    /// Background event intensity: `base + slope * age` events per year.
    #[serde(default = "default_event_rate")]
    pub base_event_rate: f64,
    #[serde(default = "default_event_rate_slope")]
    pub event_rate_age_slope: f64,
    /// Personal habitual-code pool size and draw probability.
    #[serde(default = "default_palette_size")]
    pub palette_size: usize,
    #[serde(default = "default_palette_weight")]
    pub palette_weight: f64,
    /// Per-diagnosis base hazard (per year over the forecast interval).
    pub diagnosis_base_hazard: Vec<f64>,
    /// Diagnosis hazard is scaled by `exp(slope * age_at_forecast)`.
    #[serde(default = "default_diag_age_slope")]
    pub diagnosis_age_log_slope: f64,
    pub death_base_hazard: f64,
    #[serde(default = "default_death_age_slope")]
    pub death_age_log_slope: f64,
    #[serde(default)]
    pub triggers: Vec<TriggerSpec>,
    #[serde(default = "default_trigger_min_age")]
    pub trigger_min_age: f64,
    #[serde(default)]
    pub shock: Option<ShockSpec>,
}

fn default_history_years() -> f64 {
    60.0
}
fn default_min_age() -> f64 {
    5.0
}
fn default_forecast_years() -> f64 {
    5.0
}
fn default_buffer_years() -> f64 {
    0.25
}
fn default_forecast_start_year() -> f64 {
    2016.0
}
fn default_event_rate() -> f64 {
    0.6
}
fn default_event_rate_slope() -> f64 {
    0.015
}
fn default_palette_size() -> usize {
    8
}
fn default_palette_weight() -> f64 {
    0.8
}
fn default_diag_age_slope() -> f64 {
    0.01
}
fn default_death_age_slope() -> f64 {
    0.055
}
fn default_trigger_min_age() -> f64 {
    5.0
}

impl CohortConfig {
    pub fn vocab_size(&self) -> usize {
        self.code_types.iter().map(|t| t.count).sum()
    }

    pub fn n_diagnoses(&self) -> usize {
        self.n_classes - 2
    }

    pub fn death_class(&self) -> usize {
        self.n_classes - 2
    }

    pub fn none_class(&self) -> usize {
        self.n_classes - 1
    }

    pub fn class_name(&self, class: usize) -> String {
        class_name(class, self.n_classes)
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if self.n_persons == 0 {
            return Err(CohortError::Config("n_persons must be positive".into()));
        }
        if self.n_classes < 3 {
            return Err(CohortError::Config(
                "need at least one diagnosis plus death plus none".into(),
            ));
        }
        let vocab = self.vocab_size();
        if vocab == 0 {
            return Err(CohortError::Config("vocab must be non-empty".into()));
        }
        if self.diagnosis_base_hazard.len() != self.n_diagnoses() {
            return Err(CohortError::Config(format!(
                "diagnosis_base_hazard has {} entries for {} diagnosis classes",
                self.diagnosis_base_hazard.len(),
                self.n_diagnoses()
            )));
        }
        for t in &self.triggers {
            if t.code >= vocab {
                return Err(CohortError::Config(format!(
                    "trigger code {} outside vocab {vocab}",
                    t.code
                )));
            }
            if t.class >= self.n_diagnoses() {
                return Err(CohortError::Config(format!(
                    "trigger class {} is not a diagnosis",
                    t.class
                )));
            }
            if !(0.0..=1.0).contains(&t.plant_prob) || t.multiplier < 0.0 {
                return Err(CohortError::Config("bad trigger probabilities".into()));
            }
        }
        if let Some(s) = &self.shock {
            if s.codes.is_empty() || s.codes.iter().any(|&c| c >= vocab) {
                return Err(CohortError::Config("shock codes outside vocab".into()));
            }
            if !(0.0..=1.0).contains(&s.prob) {
                return Err(CohortError::Config("shock prob outside [0,1]".into()));
            }
        }
        if self.min_age_at_forecast >= self.history_years {
            return Err(CohortError::Config(
                "min_age_at_forecast must lie below history_years".into(),
            ));
        }
        if self.buffer_years < 0.0 || self.buffer_years >= 1.0 {
            return Err(CohortError::Config("buffer_years must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.palette_weight) {
            return Err(CohortError::Config("palette_weight outside [0,1]".into()));
        }
        Ok(())
    }

    /// The seed-pinned cohort used by the acceptance experiments: 20k
    /// persons, vocab 200 over the seven code sources, 10 classes
    /// (8 diagnoses + death + none), skewed towards none, one strong and
    /// one weak trigger per diagnosis, and a 3% mid-life shock group.
    pub fn standard() -> Self {
        let code_types = vec![
            CodeTypeSpec { name: "visits".into(), count: 40 },
            CodeTypeSpec { name: "drugs".into(), count: 30 },
            CodeTypeSpec { name: "endpoints".into(), count: 50 },
            CodeTypeSpec { name: "icd".into(), count: 40 },
            CodeTypeSpec { name: "infections".into(), count: 10 },
            CodeTypeSpec { name: "surgical_procedures".into(), count: 20 },
            CodeTypeSpec { name: "primary_care_procedures".into(), count: 10 },
        ];
        let n_diagnoses = 8;
        let mut triggers = Vec::new();
        for class in 0..n_diagnoses {
            // strong trigger in the endpoints range, weak one in drugs
            triggers.push(TriggerSpec {
                class,
                code: 70 + class,
                multiplier: 16.0,
                plant_prob: 0.09,
            });
            triggers.push(TriggerSpec {
                class,
                code: 40 + class,
                multiplier: 5.0,
                plant_prob: 0.09,
            });
        }
        CohortConfig {
            n_persons: 20_000,
            code_types,
            n_classes: n_diagnoses + 2,
            history_years: 60.0,
            min_age_at_forecast: 5.0,
            forecast_years: 5.0,
            buffer_years: 0.25,
            forecast_start_year: 2016.0,
            base_event_rate: 0.6,
            event_rate_age_slope: 0.015,
            palette_size: 8,
            palette_weight: 0.8,
            diagnosis_base_hazard: vec![0.00095; n_diagnoses],
            diagnosis_age_log_slope: 0.02,
            death_base_hazard: 2.2e-4,
            death_age_log_slope: 0.085,
            triggers,
            trigger_min_age: 5.0,
            shock: Some(ShockSpec {
                prob: 0.03,
                age: 40.0,
                n_codes: 8,
                codes: (190..200).collect(),
            }),
        }
    }
}

/// Display name under the crate-wide class layout: diagnoses `d00..`,
/// then `death`, then `none`.
pub fn class_name(class: usize, n_classes: usize) -> String {
    if class + 2 < n_classes {
        format!("d{class:02}")
    } else if class + 2 == n_classes {
        "death".to_string()
    } else {
        "none".to_string()
    }
}

/// One coded event: what and at which (fractional) age.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub code: usize,
    pub age: f64,
}

/// One individual: historical events plus forecast-interval labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonRecord {
    pub person_id: u64,
    pub birth_year: f64,
    /// Time-ordered, strictly inside the historical interval.
    pub events: Vec<Event>,
    pub labels: LabelVector,
}

impl PersonRecord {
    pub fn age_at_forecast(&self, forecast_start_year: f64) -> f64 {
        forecast_start_year - self.birth_year
    }
}

/// Person-level split; proportions 70/10/20 within one person each.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub valid: Vec<u64>,
    pub test: Vec<u64>,
}

/// Exact 70/10/20 partition sizes (train and valid rounded half away from
/// zero, test takes the rest).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let valid = (n as f64 * 0.1).round() as usize;
    (train, valid, n - train - valid)
}

pub fn split(dataset: &[PersonRecord], seed: u64) -> Result<DatasetSplit, CohortError> {
    let n = dataset.len();
    if n < 10 {
        return Err(CohortError::Config(
            "need at least 10 persons to split".into(),
        ));
    }
    let mut ids: Vec<u64> = dataset.iter().map(|p| p.person_id).collect();
    let mut rng = rng_for(seed, stream::SPLIT, 0);
    rand::seq::SliceRandom::shuffle(&mut ids[..], &mut rng);
    let (n_train, n_valid, _) = split_sizes(n);
    let mut train = ids[..n_train].to_vec();
    let mut valid = ids[n_train..n_train + n_valid].to_vec();
    let mut test = ids[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit { train, valid, test })
}

/// Resolve split ids against a dataset (ids must exist).
pub fn select<'a>(
    dataset: &'a [PersonRecord],
    ids: &[u64],
) -> Result<Vec<&'a PersonRecord>, CohortError> {
    let by_id: std::collections::HashMap<u64, &PersonRecord> =
        dataset.iter().map(|p| (p.person_id, p)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| CohortError::Data(format!("person {id} not in dataset")))
        })
        .collect()
}

/// Generate a cohort. Fully determined by `(cfg, seed)`: every person draws
/// from an independently derived sub-stream.
pub fn generate(cfg: &CohortConfig, seed: u64) -> Result<Vec<PersonRecord>, CohortError> {
    cfg.validate()?;
    let vocab = cfg.vocab_size();
    let reserved: std::collections::HashSet<usize> = cfg
        .triggers
        .iter()
        .map(|t| t.code)
        .chain(cfg.shock.iter().flat_map(|s| s.codes.iter().copied()))
        .collect();
    let background_pool: Vec<usize> = (0..vocab).filter(|c| !reserved.contains(c)).collect();
    if background_pool.is_empty() {
        return Err(CohortError::Config(
            "no background codes left after reserving triggers and shocks".into(),
        ));
    }

    let mut persons = Vec::with_capacity(cfg.n_persons);
    for i in 0..cfg.n_persons {
        let mut rng = rng_for(seed, stream::GENERATE, i as u64);
        let age_f = rng.gen_range(cfg.min_age_at_forecast..cfg.history_years);
        let horizon = age_f - cfg.buffer_years;

        let palette: Vec<usize> = (0..cfg.palette_size)
            .map(|_| background_pool[rng.gen_range(0..background_pool.len())])
            .collect();
        let draw_code = |rng: &mut rand_chacha::ChaCha8Rng| -> usize {
            if !palette.is_empty() && rng.gen::<f64>() < cfg.palette_weight {
                palette[rng.gen_range(0..palette.len())]
            } else {
                background_pool[rng.gen_range(0..background_pool.len())]
            }
        };

        let mut events: Vec<Event> = Vec::new();
        let mut year = 0.0f64;
        while year < horizon {
            let rate = (cfg.base_event_rate + cfg.event_rate_age_slope * year).max(1e-9);
            let n: u64 = Poisson::new(rate).expect("positive rate").sample(&mut rng) as u64;
            for _ in 0..n {
                let age = year + rng.gen::<f64>();
                if age < horizon {
                    let code = draw_code(&mut rng);
                    events.push(Event { code, age });
                }
            }
            year += 1.0;
        }

        // plant triggers; each multiplies its class hazard when present
        let mut class_multiplier = vec![1.0f64; cfg.n_diagnoses()];
        for t in &cfg.triggers {
            if horizon > cfg.trigger_min_age && rng.gen::<f64>() < t.plant_prob {
                let age = rng.gen_range(cfg.trigger_min_age..horizon);
                events.push(Event { code: t.code, age });
                class_multiplier[t.class] *= t.multiplier;
            }
        }

        if let Some(s) = &cfg.shock {
            if age_f >= s.age + 2.0 && rng.gen::<f64>() < s.prob {
                for _ in 0..s.n_codes {
                    let age = s.age + rng.gen::<f64>() * 0.9;
                    let code = s.codes[rng.gen_range(0..s.codes.len())];
                    events.push(Event { code, age });
                }
            }
        }

        if events.is_empty() {
            let age = rng.gen_range(0.0..horizon.max(0.1));
            let code = background_pool[rng.gen_range(0..background_pool.len())];
            events.push(Event { code, age });
        }
        events.sort_by(|a, b| a.age.partial_cmp(&b.age).expect("finite ages"));

        let mut labels = LabelVector::new(cfg.n_classes);
        let age_factor = (cfg.diagnosis_age_log_slope * age_f).exp();
        for c in 0..cfg.n_diagnoses() {
            let hazard = cfg.diagnosis_base_hazard[c] * class_multiplier[c] * age_factor;
            let p_onset = 1.0 - (-hazard * cfg.forecast_years).exp();
            if rng.gen::<f64>() < p_onset {
                labels.set(c, true);
            }
        }
        let death_hazard = cfg.death_base_hazard * (cfg.death_age_log_slope * age_f).exp();
        let p_death = 1.0 - (-death_hazard * cfg.forecast_years).exp();
        if rng.gen::<f64>() < p_death {
            labels.set(cfg.death_class(), true);
        }
        if labels.count_positive() == 0 {
            labels.set(cfg.none_class(), true);
        }

        persons.push(PersonRecord {
            person_id: i as u64,
            birth_year: cfg.forecast_start_year - age_f,
            events,
            labels,
        });
    }
    Ok(persons)
}

/// Persons whose history contains a shock-burst event (a shock-pool code
/// within a year of the shock age). Background draws never use shock codes,
/// so membership is exact.
pub fn shock_member_ids(dataset: &[PersonRecord], shock: &ShockSpec) -> Vec<u64> {
    let pool: std::collections::HashSet<usize> = shock.codes.iter().copied().collect();
    dataset
        .iter()
        .filter(|p| {
            p.events
                .iter()
                .any(|e| pool.contains(&e.code) && e.age >= shock.age && e.age < shock.age + 1.0)
        })
        .map(|p| p.person_id)
        .collect()
}

#[cfg(test)]
mod tests;
