//! Person records to model inputs.

use super::{CohortError, PersonRecord};
use crate::model::{InputSequence, ModelConfig};

/// Table bounds the conversion must respect.
#[derive(Clone, Copy, Debug)]
pub struct SequenceLimits {
    pub max_seq_len: usize,
    pub n_ages: usize,
    pub n_t2f: usize,
}

impl From<&ModelConfig> for SequenceLimits {
    fn from(cfg: &ModelConfig) -> Self {
        SequenceLimits {
            max_seq_len: cfg.max_seq_len,
            n_ages: cfg.n_ages,
            n_t2f: cfg.n_t2f,
        }
    }
}

/// How many age / t2f values were clamped into table range.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClipStats {
    pub ages_clipped: usize,
    pub t2f_clipped: usize,
}

impl ClipStats {
    pub fn total(&self) -> usize {
        self.ages_clipped + self.t2f_clipped
    }
}

/// Build the code / age / position / t2f streams for one person.
///
/// `t2f` is the whole number of years from the event to the forecast start;
/// sequences longer than the budget keep the most recent events. Values
/// outside the age / t2f tables are clamped and counted rather than
/// rejected. Events inside the buffer (or past the forecast start) are data
/// errors.
pub fn to_input_sequence(
    p: &PersonRecord,
    forecast_start_year: f64,
    buffer_years: f64,
    limits: &SequenceLimits,
) -> Result<(InputSequence, ClipStats), CohortError> {
    if p.events.is_empty() {
        return Err(CohortError::Data(format!(
            "person {} has no events",
            p.person_id
        )));
    }
    let forecast_age = p.age_at_forecast(forecast_start_year);
    let cutoff = forecast_age - buffer_years;
    let mut stats = ClipStats::default();
    let mut codes = Vec::with_capacity(p.events.len());
    let mut ages = Vec::with_capacity(p.events.len());
    let mut t2f = Vec::with_capacity(p.events.len());
    let mut prev_age = f64::NEG_INFINITY;
    for e in &p.events {
        if e.age >= cutoff {
            return Err(CohortError::Data(format!(
                "person {}: event at age {:.3} falls inside the buffer before forecast age {:.3}",
                p.person_id, e.age, forecast_age
            )));
        }
        if e.age < prev_age {
            return Err(CohortError::Data(format!(
                "person {}: events out of order",
                p.person_id
            )));
        }
        prev_age = e.age;
        let age_id = e.age.max(0.0).floor() as usize;
        let age_id = if age_id >= limits.n_ages {
            stats.ages_clipped += 1;
            limits.n_ages - 1
        } else {
            age_id
        };
        let t2f_id = (forecast_age - e.age).floor().max(0.0) as usize;
        let t2f_id = if t2f_id >= limits.n_t2f {
            stats.t2f_clipped += 1;
            limits.n_t2f - 1
        } else {
            t2f_id
        };
        codes.push(e.code);
        ages.push(age_id);
        t2f.push(t2f_id);
    }
    // clamping the age ceiling can break monotonicity against clamped t2f
    // only in degenerate configs; monotonicity over raw values is exact
    if codes.len() > limits.max_seq_len {
        let start = codes.len() - limits.max_seq_len;
        codes.drain(..start);
        ages.drain(..start);
        t2f.drain(..start);
    }
    let seq = InputSequence::new(codes, ages, t2f)
        .map_err(|e| CohortError::Data(format!("person {}: {e}", p.person_id)))?;
    Ok((seq, stats))
}
