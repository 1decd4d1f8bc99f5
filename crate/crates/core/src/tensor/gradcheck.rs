//! Central finite differences for verifying analytic gradients.
//!
//! Only evaluates the forward path, so it stays independent of the backward
//! rules it is used to check. Run in `f64`: with step `h = 1e-5` truncation
//! error sits far below the `1e-6` relative tolerance used by the tests.

/// Numeric gradient of `f` with respect to every entry of every parameter
/// vector, by central differences with step `h`.
pub fn central_difference<F>(f: F, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let plus = f(&work);
            work[p][i] = orig - h;
            let minus = f(&work);
            work[p][i] = orig;
            g[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst per-tensor relative error between analytic and numeric gradients:
/// `|a - n| / max(|a|, |n|, 1e-8)` with `|.|` the L2 norm over one
/// parameter tensor. Individual near-zero entries sit below the
/// finite-difference roundoff floor (`~eps * |f| / h`), so the check is at
/// tensor granularity.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: usize,
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheck {
    let mut check = GradCheck {
        max_rel_err: 0.0,
        worst_param: 0,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        assert_eq!(a.len(), n.len(), "gradient length mismatch for param {p}");
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for (&av, &nv) in a.iter().zip(n.iter()) {
            diff_sq += (av - nv) * (av - nv);
            a_sq += av * av;
            n_sq += nv * nv;
        }
        let rel = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-8);
        if rel > check.max_rel_err {
            check.max_rel_err = rel;
            check.worst_param = p;
        }
    }
    check
}
