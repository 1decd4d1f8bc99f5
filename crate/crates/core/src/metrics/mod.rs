//! Multi-label ranking metrics with explicit tie handling.
//!
//! AUROC uses the rank-sum (Mann-Whitney) form with midranks for ties;
//! AUPRC is average precision over the score-sorted sweep with tied scores
//! entering as one group; Recall@k ranks per person with ties broken by
//! lower class index. Macro averages weight classes equally and report
//! which classes were excluded as degenerate. All computation is in f64
//! regardless of the model precision.

mod bootstrap;

pub use bootstrap::{bootstrap_std, BootstrapResult};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid score matrix: {0}")]
    Shape(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// Equal weight to each (person, class) instance.
    Micro,
    /// Equal weight to each class.
    Macro,
}

/// Scores and binary labels for `n` persons over `c` classes, row-major.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    n: usize,
    c: usize,
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(
        scores: Vec<f64>,
        labels: Vec<bool>,
        n: usize,
        c: usize,
    ) -> Result<Self, MetricError> {
        if scores.len() != n * c || labels.len() != n * c {
            return Err(MetricError::Shape(format!(
                "expected {} entries, got {} scores / {} labels",
                n * c,
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::Shape("scores must be finite".into()));
        }
        Ok(ScoreMatrix {
            n,
            c,
            scores,
            labels,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.n
    }

    pub fn n_classes(&self) -> usize {
        self.c
    }

    pub fn score(&self, i: usize, class: usize) -> f64 {
        self.scores[i * self.c + class]
    }

    pub fn label(&self, i: usize, class: usize) -> bool {
        self.labels[i * self.c + class]
    }

    /// Rows resampled (with replacement) by index.
    pub fn resample(&self, indices: &[usize]) -> ScoreMatrix {
        let mut scores = Vec::with_capacity(indices.len() * self.c);
        let mut labels = Vec::with_capacity(indices.len() * self.c);
        for &i in indices {
            scores.extend_from_slice(&self.scores[i * self.c..(i + 1) * self.c]);
            labels.extend_from_slice(&self.labels[i * self.c..(i + 1) * self.c]);
        }
        ScoreMatrix {
            n: indices.len(),
            c: self.c,
            scores,
            labels,
        }
    }

    fn class_column(&self, class: usize) -> (Vec<f64>, Vec<bool>) {
        let scores = (0..self.n).map(|i| self.score(i, class)).collect();
        let labels = (0..self.n).map(|i| self.label(i, class)).collect();
        (scores, labels)
    }
}

/// Metric value plus the classes a macro average had to skip.
#[derive(Clone, Debug)]
pub struct MetricResult {
    pub value: f64,
    pub excluded_classes: Vec<usize>,
}

/// Binary AUROC by midranked rank sum. `None` when either class is absent.
pub fn binary_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank over the tie group [i, j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Binary average precision over the descending score sweep, tied scores
/// grouped: `AP = sum_i (R_i - R_{i-1}) * P_i`. `None` without positives.
pub fn binary_average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}

fn macro_average<F>(m: &ScoreMatrix, per_class: F) -> Result<MetricResult, MetricError>
where
    F: Fn(&[f64], &[bool]) -> Option<f64>,
{
    let mut values = Vec::new();
    let mut excluded = Vec::new();
    for class in 0..m.c {
        let (scores, labels) = m.class_column(class);
        match per_class(&scores, &labels) {
            Some(v) => values.push(v),
            None => excluded.push(class),
        }
    }
    if values.is_empty() {
        return Err(MetricError::Undefined(
            "no class admits the metric".into(),
        ));
    }
    Ok(MetricResult {
        value: values.iter().sum::<f64>() / values.len() as f64,
        excluded_classes: excluded,
    })
}

pub fn auroc(m: &ScoreMatrix, averaging: Averaging) -> Result<MetricResult, MetricError> {
    match averaging {
        Averaging::Micro => binary_auroc(&m.scores, &m.labels)
            .map(|value| MetricResult {
                value,
                excluded_classes: Vec::new(),
            })
            .ok_or_else(|| {
                MetricError::Undefined("need at least one positive and one negative".into())
            }),
        Averaging::Macro => macro_average(m, binary_auroc),
    }
}

pub fn auprc(m: &ScoreMatrix, averaging: Averaging) -> Result<MetricResult, MetricError> {
    match averaging {
        Averaging::Micro => binary_average_precision(&m.scores, &m.labels)
            .map(|value| MetricResult {
                value,
                excluded_classes: Vec::new(),
            })
            .ok_or_else(|| MetricError::Undefined("no positive instance".into())),
        Averaging::Macro => macro_average(m, binary_average_precision),
    }
}

/// Fraction of true labels captured by each person's `k` highest-scoring
/// classes (ties broken by lower class index). `exclude` drops classes from
/// both the ranking and the capture accounting.
pub fn recall_at_k(
    m: &ScoreMatrix,
    k: usize,
    averaging: Averaging,
    exclude: &[usize],
) -> Result<MetricResult, MetricError> {
    let active: Vec<usize> = (0..m.c).filter(|c| !exclude.contains(c)).collect();
    if active.len() < k || k == 0 {
        return Err(MetricError::Undefined(format!(
            "top-{k} needs at least {k} rankable classes, have {}",
            active.len()
        )));
    }
    // per person: the k top-ranked active classes
    let mut captured = vec![0usize; m.c];
    let mut positives = vec![0usize; m.c];
    for i in 0..m.n {
        let mut ranked = active.clone();
        ranked.sort_by(|&a, &b| {
            m.score(i, b)
                .partial_cmp(&m.score(i, a))
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        let top = &ranked[..k];
        for &class in &active {
            if m.label(i, class) {
                positives[class] += 1;
                if top.contains(&class) {
                    captured[class] += 1;
                }
            }
        }
    }
    match averaging {
        Averaging::Micro => {
            let total: usize = active.iter().map(|&c| positives[c]).sum();
            if total == 0 {
                return Err(MetricError::Undefined("no positive instance".into()));
            }
            let hit: usize = active.iter().map(|&c| captured[c]).sum();
            Ok(MetricResult {
                value: hit as f64 / total as f64,
                excluded_classes: Vec::new(),
            })
        }
        Averaging::Macro => {
            let mut values = Vec::new();
            let mut excluded: Vec<usize> = exclude.to_vec();
            for &class in &active {
                if positives[class] == 0 {
                    excluded.push(class);
                } else {
                    values.push(captured[class] as f64 / positives[class] as f64);
                }
            }
            if values.is_empty() {
                return Err(MetricError::Undefined("no class has positives".into()));
            }
            excluded.sort_unstable();
            Ok(MetricResult {
                value: values.iter().sum::<f64>() / values.len() as f64,
                excluded_classes: excluded,
            })
        }
    }
}

/// Per-class AUROC column (`None` where a class lacks both outcomes).
pub fn per_class_auroc(m: &ScoreMatrix) -> Vec<Option<f64>> {
    (0..m.c)
        .map(|class| {
            let (scores, labels) = m.class_column(class);
            binary_auroc(&scores, &labels)
        })
        .collect()
}

/// Per-class Recall@k capture rate (`None` where a class has no positives).
pub fn per_class_recall_at_k(
    m: &ScoreMatrix,
    k: usize,
    exclude: &[usize],
) -> Result<Vec<Option<f64>>, MetricError> {
    let active: Vec<usize> = (0..m.c).filter(|c| !exclude.contains(c)).collect();
    if active.len() < k || k == 0 {
        return Err(MetricError::Undefined(format!(
            "top-{k} needs at least {k} rankable classes, have {}",
            active.len()
        )));
    }
    let mut captured = vec![0usize; m.c];
    let mut positives = vec![0usize; m.c];
    for i in 0..m.n {
        let mut ranked = active.clone();
        ranked.sort_by(|&a, &b| {
            m.score(i, b)
                .partial_cmp(&m.score(i, a))
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        let top = &ranked[..k];
        for &class in &active {
            if m.label(i, class) {
                positives[class] += 1;
                if top.contains(&class) {
                    captured[class] += 1;
                }
            }
        }
    }
    Ok((0..m.c)
        .map(|class| {
            if exclude.contains(&class) || positives[class] == 0 {
                None
            } else {
                Some(captured[class] as f64 / positives[class] as f64)
            }
        })
        .collect())
}

/// Per-class positive prevalence.
pub fn per_class_prevalence(m: &ScoreMatrix) -> Vec<f64> {
    (0..m.c)
        .map(|class| {
            (0..m.n).filter(|&i| m.label(i, class)).count() as f64 / m.n.max(1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests;
