//! Person-level bootstrap with replacement.
//!
//! Each iteration draws its seed from `(seed, iteration)`, so results are
//! identical regardless of thread count. Resamples on which the metric is
//! undefined (for example a class losing all its positives) are redrawn and
//! counted.

use rand::Rng;
use rayon::prelude::*;

use crate::rng::{rng_for, stream};

use super::{MetricError, ScoreMatrix};

#[derive(Clone, Copy, Debug)]
pub struct BootstrapResult {
    pub mean: f64,
    pub std: f64,
    /// Resamples that had to be redrawn because the metric was undefined.
    pub redraws: usize,
}

const MAX_REDRAWS: usize = 100;

pub fn bootstrap_std<F>(
    metric: F,
    m: &ScoreMatrix,
    iters: usize,
    seed: u64,
) -> Result<BootstrapResult, MetricError>
where
    F: Fn(&ScoreMatrix) -> Result<f64, MetricError> + Sync,
{
    if iters < 2 {
        return Err(MetricError::Undefined(
            "bootstrap needs at least 2 iterations".into(),
        ));
    }
    let n = m.n_instances();
    let results: Vec<Result<(f64, usize), MetricError>> = (0..iters as u64)
        .into_par_iter()
        .map(|it| {
            let mut rng = rng_for(seed, stream::BOOTSTRAP, it);
            let mut redraws = 0usize;
            loop {
                let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                match metric(&m.resample(&indices)) {
                    Ok(v) => return Ok((v, redraws)),
                    Err(_) if redraws < MAX_REDRAWS => {
                        redraws += 1;
                        rng = rng_for(
                            seed,
                            stream::BOOTSTRAP_REDRAW,
                            it * MAX_REDRAWS as u64 + redraws as u64,
                        );
                    }
                    Err(e) => {
                        return Err(MetricError::Undefined(format!(
                            "iteration {it}: metric stayed undefined after {MAX_REDRAWS} redraws: {e}"
                        )))
                    }
                }
            }
        })
        .collect();

    let mut values = Vec::with_capacity(iters);
    let mut redraws = 0usize;
    for r in results {
        let (v, rd) = r?;
        values.push(v);
        redraws += rd;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    Ok(BootstrapResult {
        mean,
        std: var.sqrt(),
        redraws,
    })
}
