//! Count-vector logistic regression reference model.
//!
//! Features are raw code-occurrence counts over the historical interval
//! with the person's age at forecast start appended (standardized by
//! train-set mean/std). One independent L1-penalized binary model per
//! class, fit by accelerated proximal gradient descent with backtracking;
//! the penalty strength follows the inverse-regularization convention
//! (`lambda = 1 / (C * N)` on the mean log-loss).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PersonRecord;
use crate::labels::LabelVector;

#[derive(Debug, Error)]
pub enum LogRegError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("model not fitted")]
    NotFitted,
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Code counts over the historical interval plus age at forecast start.
#[derive(Clone, Debug, PartialEq)]
pub struct CountFeature {
    pub counts: Vec<u32>,
    pub age: f64,
}

impl CountFeature {
    /// Feature-vector length: one slot per code plus the age column.
    pub fn dimension(&self) -> usize {
        self.counts.len() + 1
    }
}

/// Exact multiset counts of a person's codes; event order is irrelevant.
pub fn featurize(p: &PersonRecord, forecast_start_year: f64, vocab_size: usize) -> CountFeature {
    let mut counts = vec![0u32; vocab_size];
    for e in &p.events {
        if e.code < vocab_size {
            counts[e.code] += 1;
        }
    }
    CountFeature {
        counts,
        age: p.age_at_forecast(forecast_start_year),
    }
}

/// Train-set age statistics; fitted once and reused at prediction time so
/// no test-set information leaks into the transform.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AgeScaler {
    pub mean: f64,
    pub std: f64,
}

impl AgeScaler {
    pub fn fit(ages: impl Iterator<Item = f64> + Clone) -> AgeScaler {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for a in ages.clone() {
            n += 1;
            sum += a;
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        let var = ages.map(|a| (a - mean) * (a - mean)).sum::<f64>() / n.max(1) as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        AgeScaler { mean, std }
    }

    pub fn transform(&self, age: f64) -> f64 {
        (age - self.mean) / self.std
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Inverse regularization strength (the usual `C`).
    pub inverse_strength: f64,
    pub max_iters: usize,
    /// Proximal-gradient residual norm below which a class has converged.
    pub tol: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            inverse_strength: 0.1,
            max_iters: 2000,
            tol: 1e-5,
        }
    }
}

/// One binary one-vs-rest member.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ClassFit {
    Trained {
        weights: Vec<f64>,
        intercept: f64,
        converged: bool,
        iterations: usize,
    },
    /// Class lacked both outcomes in training; predicts its prevalence.
    Skipped { prevalence: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRegModel {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub scaler: AgeScaler,
    pub penalty: PenaltyConfig,
    pub classes: Vec<ClassFit>,
}

/// Sparse row view of the standardized design matrix.
struct Design {
    rows: Vec<Vec<(u32, f64)>>,
    dim: usize,
}

impl Design {
    fn build(features: &[CountFeature], scaler: &AgeScaler) -> Design {
        let dim = features[0].dimension();
        let rows = features
            .iter()
            .map(|f| {
                let mut row: Vec<(u32, f64)> = f
                    .counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(i, &c)| (i as u32, c as f64))
                    .collect();
                row.push(((dim - 1) as u32, scaler.transform(f.age)));
                row
            })
            .collect();
        Design { rows, dim }
    }

    fn margin(&self, row: usize, w: &[f64], b: f64) -> f64 {
        let mut m = b;
        for &(i, v) in &self.rows[row] {
            m += w[i as usize] * v;
        }
        m
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean log-loss over the design.
fn smooth_loss(design: &Design, y: &[f64], w: &[f64], b: f64) -> f64 {
    let n = design.rows.len() as f64;
    let mut acc = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let m = design.margin(i, w, b);
        acc += yi * softplus(-m) + (1.0 - yi) * softplus(m);
    }
    acc / n
}

/// Gradient of the mean log-loss; returns (grad_w, grad_b).
fn smooth_grad(design: &Design, y: &[f64], w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let n = design.rows.len() as f64;
    let mut gw = vec![0.0; design.dim - 1 + 1];
    let mut gb = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let err = sigmoid(design.margin(i, w, b)) - yi;
        gb += err;
        for &(j, v) in &design.rows[i] {
            gw[j as usize] += err * v;
        }
    }
    for g in gw.iter_mut() {
        *g /= n;
    }
    (gw, gb / n)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

struct BinaryFit {
    weights: Vec<f64>,
    intercept: f64,
    converged: bool,
    iterations: usize,
}

/// FISTA with backtracking on `mean log-loss + lambda * ||w||_1`
/// (intercept unpenalized), function-value restart, convergence on the
/// proximal-gradient residual norm.
fn fit_binary(design: &Design, y: &[f64], lambda: f64, cfg: &PenaltyConfig) -> BinaryFit {
    let dim = design.dim;
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut w_prev = w.clone();
    let mut b_prev = b;
    let mut momentum = 1.0f64;
    let mut step = 1.0f64;
    let mut best = (f64::INFINITY, w.clone(), b);
    let mut converged = false;
    let mut iterations = 0;

    let objective = |w: &[f64], b: f64| -> f64 {
        smooth_loss(design, y, w, b) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    };

    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        // momentum point
        let beta = (momentum - 1.0) / {
            let next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            momentum = next;
            next
        };
        let z: Vec<f64> = w
            .iter()
            .zip(w_prev.iter())
            .map(|(&cur, &prev)| cur + beta * (cur - prev))
            .collect();
        let zb = b + beta * (b - b_prev);

        let fz = smooth_loss(design, y, &z, zb);
        let (gz, gzb) = smooth_grad(design, y, &z, zb);

        // backtracking line search on the smooth part
        let (mut w_new, mut b_new);
        loop {
            w_new = z
                .iter()
                .zip(gz.iter())
                .map(|(&zi, &gi)| soft_threshold(zi - step * gi, step * lambda))
                .collect::<Vec<f64>>();
            b_new = zb - step * gzb;
            let f_new = smooth_loss(design, y, &w_new, b_new);
            let mut quad = fz;
            let mut dist_sq = (b_new - zb) * (b_new - zb);
            for j in 0..dim {
                let d = w_new[j] - z[j];
                quad += gz[j] * d;
                dist_sq += d * d;
            }
            quad += gzb * (b_new - zb) + dist_sq / (2.0 * step);
            if f_new <= quad + 1e-12 || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }

        // restart momentum when the objective rises
        let obj_new = objective(&w_new, b_new);
        if obj_new > objective(&w, b) {
            momentum = 1.0;
        }
        if obj_new < best.0 {
            best = (obj_new, w_new.clone(), b_new);
        }

        w_prev = std::mem::replace(&mut w, w_new);
        b_prev = std::mem::replace(&mut b, b_new);

        // proximal-gradient residual at the new point
        let (gw, gb) = smooth_grad(design, y, &w, b);
        let mut res_sq = gb * gb;
        for j in 0..dim {
            let prox = soft_threshold(w[j] - step * gw[j], step * lambda);
            let r = (w[j] - prox) / step;
            res_sq += r * r;
        }
        if res_sq.sqrt() <= cfg.tol {
            converged = true;
            best = (objective(&w, b), w.clone(), b);
            break;
        }
    }

    BinaryFit {
        weights: best.1,
        intercept: best.2,
        converged,
        iterations,
    }
}

impl LogRegModel {
    /// One-vs-rest fit; class fits run in parallel. Classes lacking a
    /// positive or a negative example are skipped with a constant
    /// prevalence predictor.
    pub fn fit_ovr(
        features: &[CountFeature],
        labels: &[LabelVector],
        penalty: PenaltyConfig,
    ) -> Result<LogRegModel, LogRegError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(LogRegError::Input(format!(
                "{} features vs {} label vectors",
                features.len(),
                labels.len()
            )));
        }
        let vocab_size = features[0].counts.len();
        if features.iter().any(|f| f.counts.len() != vocab_size) {
            return Err(LogRegError::Input("inconsistent feature widths".into()));
        }
        let n_classes = labels[0].n_classes();
        let n = features.len();
        let scaler = AgeScaler::fit(features.iter().map(|f| f.age));
        let design = Design::build(features, &scaler);
        let lambda = 1.0 / (penalty.inverse_strength * n as f64);

        let classes: Vec<ClassFit> = (0..n_classes)
            .into_par_iter()
            .map(|class| {
                let y: Vec<f64> = labels
                    .iter()
                    .map(|l| if l.get(class) { 1.0 } else { 0.0 })
                    .collect();
                let n_pos = y.iter().filter(|&&v| v > 0.5).count();
                if n_pos == 0 || n_pos == n {
                    return ClassFit::Skipped {
                        prevalence: (n_pos as f64 / n as f64).clamp(1e-12, 1.0 - 1e-12),
                    };
                }
                let fit = fit_binary(&design, &y, lambda, &penalty);
                ClassFit::Trained {
                    weights: fit.weights,
                    intercept: fit.intercept,
                    converged: fit.converged,
                    iterations: fit.iterations,
                }
            })
            .collect();

        Ok(LogRegModel {
            vocab_size,
            n_classes,
            scaler,
            penalty,
            classes,
        })
    }

    /// Per-class independent probabilities (rows need not sum to 1).
    pub fn predict_proba(&self, f: &CountFeature) -> Result<Vec<f64>, LogRegError> {
        if f.counts.len() != self.vocab_size {
            return Err(LogRegError::Input(format!(
                "feature width {} vs vocab {}",
                f.counts.len(),
                self.vocab_size
            )));
        }
        let age = self.scaler.transform(f.age);
        Ok(self
            .classes
            .iter()
            .map(|c| match c {
                ClassFit::Skipped { prevalence } => *prevalence,
                ClassFit::Trained {
                    weights, intercept, ..
                } => {
                    let mut m = *intercept + weights[self.vocab_size] * age;
                    for (i, &count) in f.counts.iter().enumerate() {
                        if count > 0 {
                            m += weights[i] * count as f64;
                        }
                    }
                    sigmoid(m)
                }
            })
            .collect())
    }

    pub fn skipped_classes(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(i, c)| matches!(c, ClassFit::Skipped { .. }).then_some(i))
            .collect()
    }

    pub fn unconverged_classes(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                ClassFit::Trained { converged: false, .. } => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<(), LogRegError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<LogRegModel, LogRegError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
