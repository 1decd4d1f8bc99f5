//! Trajectory analysis on top of a frozen model.
//!
//! Contextual per-position embeddings are pooled into one unit vector per
//! recorded age (position-weighted mean, most recent heaviest, gaps filled
//! from the preceding age). On top of those: cosine similarity, same-age
//! k-nearest-neighbor sets, the year-to-year neighborhood change rate
//! `r = 1 - |N(a-1) ∩ N(a)| / k`, per-class sigmoid-jump calibration and
//! detection, and age-wise similarity to the most similar class
//! representatives.

use std::collections::HashSet;

use thiserror::Error;

use crate::labels::LabelVector;
use crate::model::{HiddenStates, InputSequence, PredictionSeries};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("no reference has age {age} in range")]
    EmptyPool { age: usize },
    #[error("age {age} outside the embedding range")]
    MissingAge { age: usize },
    #[error("invalid input: {0}")]
    Input(String),
}

/// One unit-norm embedding per integer age in `[first_age, last_age]`,
/// gap-filled from preceding ages.
#[derive(Clone, Debug)]
pub struct AgeEmbeddingMap<S: Scalar> {
    pub person_id: u64,
    first_age: usize,
    vectors: Vec<Vec<S>>,
}

impl<S: Scalar> AgeEmbeddingMap<S> {
    pub fn first_age(&self) -> usize {
        self.first_age
    }

    pub fn last_age(&self) -> usize {
        self.first_age + self.vectors.len() - 1
    }

    pub fn ages(&self) -> std::ops::RangeInclusive<usize> {
        self.first_age()..=self.last_age()
    }

    /// The vector at `age`, or `None` outside the filled range (no
    /// extrapolation past the last recorded age).
    pub fn get(&self, age: usize) -> Option<&[S]> {
        if age < self.first_age {
            return None;
        }
        self.vectors.get(age - self.first_age).map(|v| v.as_slice())
    }
}

/// Position-weighted mean with weights `1..=m` (most recent largest), then
/// L2-normalized.
pub fn pwm_pool<S: Scalar>(embeddings: &[&[S]]) -> Result<Vec<S>, TrajectoryError> {
    if embeddings.is_empty() {
        return Err(TrajectoryError::Input("no embeddings to pool".into()));
    }
    let d = embeddings[0].len();
    let mut acc = vec![0.0f64; d];
    let mut weight_sum = 0.0f64;
    for (i, emb) in embeddings.iter().enumerate() {
        if emb.len() != d {
            return Err(TrajectoryError::Input("embedding widths differ".into()));
        }
        let w = (i + 1) as f64;
        weight_sum += w;
        for (a, &v) in acc.iter_mut().zip(emb.iter()) {
            *a += w * v.to_f64();
        }
    }
    for a in acc.iter_mut() {
        *a /= weight_sum;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(TrajectoryError::ZeroVector);
    }
    Ok(acc.iter().map(|&v| S::from_f64(v / norm)).collect())
}

/// Pool a person's final-layer states into one vector per recorded age and
/// fill interior gaps with the nearest preceding age's vector.
pub fn build_age_embeddings<S: Scalar>(
    person_id: u64,
    seq: &InputSequence,
    states: &HiddenStates<S>,
) -> Result<AgeEmbeddingMap<S>, TrajectoryError> {
    if states.n_rows != seq.len() {
        return Err(TrajectoryError::Input(format!(
            "{} states for {} positions",
            states.n_rows,
            seq.len()
        )));
    }
    let first_age = seq.ages()[0];
    let last_age = *seq.ages().last().unwrap();
    let mut vectors: Vec<Vec<S>> = Vec::with_capacity(last_age - first_age + 1);
    let mut t = 0usize;
    for age in first_age..=last_age {
        let start = t;
        while t < seq.len() && seq.ages()[t] == age {
            t += 1;
        }
        if t > start {
            let rows: Vec<&[S]> = (start..t).map(|p| states.row(p)).collect();
            vectors.push(pwm_pool(&rows)?);
        } else {
            let prev = vectors.last().expect("first age always recorded").clone();
            vectors.push(prev);
        }
    }
    Ok(AgeEmbeddingMap {
        person_id,
        first_age,
        vectors,
    })
}

/// Cosine similarity; errors on zero vectors.
pub fn cosine<S: Scalar>(u: &[S], v: &[S]) -> Result<f64, TrajectoryError> {
    if u.len() != v.len() {
        return Err(TrajectoryError::Input("vector lengths differ".into()));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v.iter()) {
        let (x, y) = (a.to_f64(), b.to_f64());
        dot += x * y;
        nu += x * x;
        nv += y * y;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(TrajectoryError::ZeroVector);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Same-age nearest neighbors, cosines non-increasing, ties broken by
/// ascending person id. References lacking `age` (and the target itself)
/// are excluded.
#[derive(Clone, Debug)]
pub struct NeighborSet {
    pub target: u64,
    pub age: usize,
    pub members: Vec<(u64, f64)>,
}

impl NeighborSet {
    pub fn ids(&self) -> HashSet<u64> {
        self.members.iter().map(|&(id, _)| id).collect()
    }
}

pub fn neighbors<S: Scalar>(
    target: &AgeEmbeddingMap<S>,
    age: usize,
    references: &[AgeEmbeddingMap<S>],
    k: usize,
) -> Result<NeighborSet, TrajectoryError> {
    let z = target.get(age).ok_or(TrajectoryError::MissingAge { age })?;
    let mut scored: Vec<(u64, f64)> = Vec::new();
    for r in references {
        if r.person_id == target.person_id {
            continue;
        }
        if let Some(v) = r.get(age) {
            scored.push((r.person_id, cosine(z, v)?));
        }
    }
    if scored.is_empty() {
        return Err(TrajectoryError::EmptyPool { age });
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite cosines").then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(NeighborSet {
        target: target.person_id,
        age,
        members: scored,
    })
}

/// Fraction of the neighborhood replaced between consecutive ages:
/// `1 - |N(a-1,k) ∩ N(a,k)| / k`, with `k` clamped to the smaller pool
/// when references run short.
pub fn rate_of_change<S: Scalar>(
    target: &AgeEmbeddingMap<S>,
    age: usize,
    k: usize,
    references: &[AgeEmbeddingMap<S>],
) -> Result<f64, TrajectoryError> {
    if age == 0 {
        return Err(TrajectoryError::MissingAge { age });
    }
    let prev = neighbors(target, age - 1, references, k)?;
    let cur = neighbors(target, age, references, k)?;
    let k_eff = prev.members.len().min(cur.members.len());
    let overlap = prev.ids().intersection(&cur.ids()).count();
    Ok(1.0 - overlap.min(k_eff) as f64 / k_eff as f64)
}

/// Mean change rate of a group at one age.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangePoint {
    pub age: usize,
    pub mean_rate: f64,
    pub n: usize,
}

/// Per-age mean [`rate_of_change`] over a group. Ages where no group
/// member admits the computation are omitted and reported.
pub fn cohort_change_curve<S: Scalar>(
    group: &[&AgeEmbeddingMap<S>],
    ages: std::ops::RangeInclusive<usize>,
    k: usize,
    references: &[AgeEmbeddingMap<S>],
) -> Result<(Vec<ChangePoint>, Vec<usize>), TrajectoryError> {
    let mut curve = Vec::new();
    let mut skipped = Vec::new();
    for age in ages {
        let mut sum = 0.0;
        let mut n = 0usize;
        for member in group {
            match rate_of_change(member, age, k, references) {
                Ok(r) => {
                    sum += r;
                    n += 1;
                }
                Err(TrajectoryError::MissingAge { .. })
                | Err(TrajectoryError::EmptyPool { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if n == 0 {
            skipped.push(age);
        } else {
            curve.push(ChangePoint {
                age,
                mean_rate: sum / n as f64,
                n,
            });
        }
    }
    Ok((curve, skipped))
}

/// Per-class mean of each person's maximum position-to-position sigmoid
/// increase, accumulated over persons positive for that class.
#[derive(Clone, Debug)]
pub struct JumpThresholds {
    pub mean_max_jump: Vec<Option<f64>>,
    pub sample_count: Vec<usize>,
}

/// Detection never fires on decreases even when the calibrated mean is
/// negative or zero.
pub const JUMP_FLOOR: f64 = 1e-6;

impl JumpThresholds {
    /// Detection threshold for a class: the calibrated mean floored at
    /// [`JUMP_FLOOR`]; `None` when the class had no calibration sample.
    pub fn threshold(&self, class: usize) -> Option<f64> {
        self.mean_max_jump[class].map(|j| j.max(JUMP_FLOOR))
    }

    pub fn undefined_classes(&self) -> Vec<usize> {
        self.mean_max_jump
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.is_none().then_some(c))
            .collect()
    }
}

/// Mean maximum jump per class over a labeled validation set. Persons with
/// a single position are skipped (no consecutive pair); non-positive
/// maxima still enter the mean.
pub fn calibrate_jumps<S: Scalar>(
    validation: &[(&PredictionSeries<S>, &LabelVector)],
) -> Result<JumpThresholds, TrajectoryError> {
    let n_classes = validation
        .first()
        .map(|(s, _)| s.n_classes())
        .ok_or_else(|| TrajectoryError::Input("empty validation set".into()))?;
    let mut sums = vec![0.0f64; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (series, labels) in validation {
        if labels.n_classes() != n_classes || series.n_classes() != n_classes {
            return Err(TrajectoryError::Input("class width mismatch".into()));
        }
        let t_n = series.n_rows();
        if t_n < 2 {
            continue;
        }
        for class in 0..n_classes {
            if !labels.get(class) {
                continue;
            }
            let mut max_jump = f64::NEG_INFINITY;
            for t in 1..t_n {
                let jump = series.row(t)[class].to_f64() - series.row(t - 1)[class].to_f64();
                if jump > max_jump {
                    max_jump = jump;
                }
            }
            sums[class] += max_jump;
            counts[class] += 1;
        }
    }
    let mean_max_jump = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(JumpThresholds {
        mean_max_jump,
        sample_count: counts,
    })
}

/// One detected sigmoid jump, attributed to the code at the later position.
#[derive(Clone, Debug)]
pub struct JumpEvent {
    pub person_id: u64,
    pub class: usize,
    pub code: usize,
    pub before: f64,
    pub after: f64,
    pub age: usize,
    pub t2f: usize,
    pub magnitude: f64,
}

/// Aggregate row of the jump table: how often a code triggered jumps for a
/// class, as a percentage of that class's detected jumps.
#[derive(Clone, Debug)]
pub struct JumpTableRow {
    pub class: usize,
    pub code: usize,
    pub count: usize,
    pub percent: f64,
    pub mean_age: f64,
    pub mean_t2f: f64,
}

pub struct PersonPredictions<'a, S: Scalar> {
    pub person_id: u64,
    pub seq: &'a InputSequence,
    pub series: &'a PredictionSeries<S>,
}

/// Scan test-set prediction series for position-to-position increases at or
/// above each class's threshold. Returns the raw events plus the per-class
/// frequency table sorted descending within each class.
pub fn detect_jumps<S: Scalar>(
    test: &[PersonPredictions<'_, S>],
    thresholds: &JumpThresholds,
) -> Result<(Vec<JumpEvent>, Vec<JumpTableRow>), TrajectoryError> {
    let n_classes = thresholds.mean_max_jump.len();
    let mut events = Vec::new();
    for person in test {
        let series = person.series;
        if series.n_classes() != n_classes {
            return Err(TrajectoryError::Input("class width mismatch".into()));
        }
        if series.n_rows() != person.seq.len() {
            return Err(TrajectoryError::Input(
                "series rows do not match the sequence (per-position output required)".into(),
            ));
        }
        for t in 1..series.n_rows() {
            for class in 0..n_classes {
                let Some(threshold) = thresholds.threshold(class) else {
                    continue;
                };
                let before = series.row(t - 1)[class].to_f64();
                let after = series.row(t)[class].to_f64();
                let magnitude = after - before;
                if magnitude >= threshold {
                    events.push(JumpEvent {
                        person_id: person.person_id,
                        class,
                        code: person.seq.codes()[t],
                        before,
                        after,
                        age: person.seq.ages()[t],
                        t2f: person.seq.t2f()[t],
                        magnitude,
                    });
                }
            }
        }
    }

    // aggregate per (class, code)
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<(usize, usize), (usize, f64, f64)> = BTreeMap::new();
    let mut class_totals = vec![0usize; n_classes];
    for e in &events {
        let entry = acc.entry((e.class, e.code)).or_insert((0, 0.0, 0.0));
        entry.0 += 1;
        entry.1 += e.age as f64;
        entry.2 += e.t2f as f64;
        class_totals[e.class] += 1;
    }
    let mut table: Vec<JumpTableRow> = acc
        .into_iter()
        .map(|((class, code), (count, age_sum, t2f_sum))| JumpTableRow {
            class,
            code,
            count,
            percent: 100.0 * count as f64 / class_totals[class] as f64,
            mean_age: age_sum / count as f64,
            mean_t2f: t2f_sum / count as f64,
        })
        .collect();
    table.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then(b.percent.partial_cmp(&a.percent).expect("finite percents"))
            .then(a.code.cmp(&b.code))
    });
    Ok((events, table))
}

/// One cell of the class-representative similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimCell {
    pub similarity: f64,
    /// References actually used (may be fewer than `k`).
    pub n_used: usize,
}

/// Age-by-class similarity of a target to the mean of its `k` most similar
/// same-age representatives of each class (mean re-normalized before the
/// final cosine). `None` cells had no reference of that class at that age.
#[derive(Clone, Debug)]
pub struct SimilarityCurves {
    pub ages: Vec<usize>,
    pub n_classes: usize,
    pub cells: Vec<Option<SimCell>>,
}

impl SimilarityCurves {
    pub fn cell(&self, age_idx: usize, class: usize) -> Option<SimCell> {
        self.cells[age_idx * self.n_classes + class]
    }
}

pub fn class_representative_similarity<S: Scalar>(
    target: &AgeEmbeddingMap<S>,
    references: &[(AgeEmbeddingMap<S>, LabelVector)],
    k: usize,
) -> Result<SimilarityCurves, TrajectoryError> {
    if references.is_empty() {
        return Err(TrajectoryError::Input("no references".into()));
    }
    let n_classes = references[0].1.n_classes();
    let ages: Vec<usize> = target.ages().collect();
    let mut cells = Vec::with_capacity(ages.len() * n_classes);
    for &age in &ages {
        let z = target.get(age).expect("age within target range");
        for class in 0..n_classes {
            // a reference joins every group its labels put it in
            let mut scored: Vec<(u64, f64, &[S])> = Vec::new();
            for (map, labels) in references {
                if map.person_id == target.person_id || !labels.get(class) {
                    continue;
                }
                if let Some(v) = map.get(age) {
                    scored.push((map.person_id, cosine(z, v)?, v));
                }
            }
            if scored.is_empty() {
                cells.push(None);
                continue;
            }
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).expect("finite cosines").then(a.0.cmp(&b.0))
            });
            scored.truncate(k);
            let d = z.len();
            let mut mean = vec![0.0f64; d];
            for (_, _, v) in &scored {
                for (m, &x) in mean.iter_mut().zip(v.iter()) {
                    *m += x.to_f64();
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                cells.push(None);
                continue;
            }
            let dot: f64 = mean
                .iter()
                .zip(z.iter())
                .map(|(&m, &zv)| m / norm * zv.to_f64())
                .sum();
            let z_norm = z.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            cells.push(Some(SimCell {
                similarity: dot / z_norm,
                n_used: scored.len(),
            }));
        }
    }
    Ok(SimilarityCurves {
        ages,
        n_classes,
        cells,
    })
}

/// Per distinct recorded age, the sigmoid row of the last position at that
/// age. By the causal conditioning property this equals a fresh forward on
/// the prefix ending there.
pub fn sigmoid_trajectory<S: Scalar>(
    seq: &InputSequence,
    series: &PredictionSeries<S>,
) -> Result<Vec<(usize, Vec<S>)>, TrajectoryError> {
    if series.n_rows() != seq.len() {
        return Err(TrajectoryError::Input(
            "series rows do not match the sequence (per-position output required)".into(),
        ));
    }
    let mut out: Vec<(usize, Vec<S>)> = Vec::new();
    for t in 0..seq.len() {
        let age = seq.ages()[t];
        let row = series.row(t).to_vec();
        match out.last_mut() {
            Some((last_age, last_row)) if *last_age == age => *last_row = row,
            _ => out.push((age, row)),
        }
    }
    Ok(out)
}
