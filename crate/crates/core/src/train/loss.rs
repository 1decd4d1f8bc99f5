//! Loss bookkeeping outside the tape.
//!
//! The differentiable loss lives on the graph (`bce_with_logits`); these
//! helpers recompute the same quantity from a [`PredictionSeries`] for
//! validation, early stopping and tests. Both paths work in log space from
//! logits, so probabilities saturated in 32-bit never produce `ln(0)`.

use crate::labels::LabelVector;
use crate::model::PredictionSeries;
use crate::scalar::Scalar;

use super::TrainError;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weighted mean binary cross-entropy of row `t` against the person's
/// labels: `(1/C) * sum_c w_c * BCE(y_c, sigmoid(logit_c))`.
pub fn position_loss<S: Scalar>(
    labels: &LabelVector,
    series: &PredictionSeries<S>,
    t: usize,
    weights: Option<&[f64]>,
) -> Result<f64, TrainError> {
    let c = series.n_classes();
    if labels.n_classes() != c {
        return Err(TrainError::Config(format!(
            "label width {} does not match {} classes",
            labels.n_classes(),
            c
        )));
    }
    if let Some(w) = weights {
        if w.len() != c {
            return Err(TrainError::Config(format!(
                "weight width {} does not match {} classes",
                w.len(),
                c
            )));
        }
    }
    let row = series.logit_row(t);
    let mut acc = 0.0;
    for (cls, (&logit, y)) in row.iter().zip(labels.iter()).enumerate() {
        let x = logit.to_f64();
        if !x.is_finite() {
            return Err(TrainError::NonFinite {
                what: "prediction logit",
            });
        }
        let w = weights.map_or(1.0, |w| w[cls]);
        let term = if y { softplus(-x) } else { softplus(x) };
        acc += w * term;
    }
    Ok(acc / c as f64)
}

/// Mean of [`position_loss`] over every row of the series (all true
/// positions in the causal variant, the single row in the cls variant).
pub fn person_loss<S: Scalar>(
    labels: &LabelVector,
    series: &PredictionSeries<S>,
    weights: Option<&[f64]>,
) -> Result<f64, TrainError> {
    let t_n = series.n_rows();
    if t_n == 0 {
        return Err(TrainError::Config("prediction series has no rows".into()));
    }
    let mut acc = 0.0;
    for t in 0..t_n {
        acc += position_loss(labels, series, t, weights)?;
    }
    Ok(acc / t_n as f64)
}
