//! Forward and backward math for the op set. All buffers are row-major.

use super::{AttentionMask, TensorError};
use crate::scalar::Scalar;

/// `c[m x n] += a[m x k] @ b[k x n]`, ikj loop order for contiguous access.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `dA = G @ B^T`.
pub fn matmul_grad_a<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut da = vec![S::zero(); m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (p, dv) in da_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *dv = acc;
        }
    }
    da
}

/// `dB = A^T @ G`.
pub fn matmul_grad_b<S: Scalar>(g: &[S], a: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut db = vec![S::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                *dv += a_ip * gv;
            }
        }
    }
    db
}

/// Logistic function, branch on sign so neither tail overflows.
#[inline]
pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<S: Scalar>(v: S) -> S {
    v.max(S::zero()) + (-v.abs()).exp().ln_1p()
}

#[inline]
fn gelu_inner<S: Scalar>(v: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    c * (v + a * v * v * v)
}

#[inline]
pub fn gelu<S: Scalar>(v: S) -> S {
    let half = S::from_f64(0.5);
    half * v * (S::one() + gelu_inner(v).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(v: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let th = gelu_inner(v).tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * v * sech2 * c * (S::one() + three * a * v * v)
}

/// Normalize each contiguous length-`d` row to zero mean / unit variance,
/// then scale and shift.
pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], d: usize, eps: S, out: &mut [S]) {
    let rows = x.len() / d;
    let inv_d = S::one() / S::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<S>()
            * inv_d;
        let inv_std = S::one() / (var + eps).sqrt();
        let out_row = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            out_row[j] = (row[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
}

/// Standard layer-norm backward; returns `(dx, dgain, dbias)`.
pub fn layer_norm_grad<S: Scalar>(
    g: &[S],
    x: &[S],
    gain: &[S],
    d: usize,
    eps: S,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / d;
    let inv_d = S::one() / S::from_f64(d as f64);
    let mut dx = vec![S::zero(); x.len()];
    let mut dgain = vec![S::zero(); d];
    let mut dbias = vec![S::zero(); d];
    let mut xhat = vec![S::zero(); d];
    let mut dxhat = vec![S::zero(); d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let g_row = &g[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<S>()
            * inv_d;
        let inv_std = S::one() / (var + eps).sqrt();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            dgain[j] += g_row[j] * xhat[j];
            dbias[j] += g_row[j];
            dxhat[j] = g_row[j] * gain[j];
        }
        let sum_dxhat = dxhat.iter().copied().sum::<S>();
        let sum_dxhat_xhat = dxhat
            .iter()
            .zip(xhat.iter())
            .map(|(&a, &b)| a * b)
            .sum::<S>();
        let dn = S::from_f64(d as f64);
        let dx_row = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dx_row[j] = inv_std * inv_d * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

#[inline]
fn head_scale<S: Scalar>(d: usize, h: usize) -> S {
    S::one() / S::from_f64(((d / h) as f64).sqrt())
}

/// `scores[h, i, j] = scale * <q_i, k_j>` restricted to head `h`'s columns.
pub fn attn_scores<S: Scalar>(q: &[S], k: &[S], t: usize, d: usize, h: usize, out: &mut [S]) {
    let dh = d / h;
    let scale = head_scale::<S>(d, h);
    for hd in 0..h {
        let col = hd * dh;
        for i in 0..t {
            let q_slice = &q[i * d + col..i * d + col + dh];
            let out_row = &mut out[hd * t * t + i * t..hd * t * t + (i + 1) * t];
            for (j, ov) in out_row.iter_mut().enumerate() {
                let k_slice = &k[j * d + col..j * d + col + dh];
                let mut acc = S::zero();
                for (&qv, &kv) in q_slice.iter().zip(k_slice) {
                    acc += qv * kv;
                }
                *ov = acc * scale;
            }
        }
    }
}

pub fn attn_scores_grad_q<S: Scalar>(g: &[S], k: &[S], t: usize, d: usize, h: usize) -> Vec<S> {
    let dh = d / h;
    let scale = head_scale::<S>(d, h);
    let mut dq = vec![S::zero(); t * d];
    for hd in 0..h {
        let col = hd * dh;
        for i in 0..t {
            let g_row = &g[hd * t * t + i * t..hd * t * t + (i + 1) * t];
            let dq_slice = &mut dq[i * d + col..i * d + col + dh];
            for (j, &gv) in g_row.iter().enumerate() {
                let k_slice = &k[j * d + col..j * d + col + dh];
                let gs = gv * scale;
                for (dv, &kv) in dq_slice.iter_mut().zip(k_slice) {
                    *dv += gs * kv;
                }
            }
        }
    }
    dq
}

pub fn attn_scores_grad_k<S: Scalar>(g: &[S], q: &[S], t: usize, d: usize, h: usize) -> Vec<S> {
    let dh = d / h;
    let scale = head_scale::<S>(d, h);
    let mut dk = vec![S::zero(); t * d];
    for hd in 0..h {
        let col = hd * dh;
        for i in 0..t {
            let g_row = &g[hd * t * t + i * t..hd * t * t + (i + 1) * t];
            let q_slice = &q[i * d + col..i * d + col + dh];
            for (j, &gv) in g_row.iter().enumerate() {
                let dk_slice = &mut dk[j * d + col..j * d + col + dh];
                let gs = gv * scale;
                for (dv, &qv) in dk_slice.iter_mut().zip(q_slice) {
                    *dv += gs * qv;
                }
            }
        }
    }
    dk
}

/// Row softmax over `batch` stacked `t x t` blocks; masked entries are
/// exactly zero in the output.
pub fn masked_softmax_rows<S: Scalar>(
    x: &[S],
    batch: usize,
    t: usize,
    mask: &AttentionMask,
    out: &mut [S],
) -> Result<(), TensorError> {
    for b in 0..batch {
        for i in 0..t {
            let base = b * t * t + i * t;
            let row = &x[base..base + t];
            let mut max = S::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if mask.allowed(i, j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut sum = S::zero();
            let out_row = &mut out[base..base + t];
            for (j, &v) in row.iter().enumerate() {
                if mask.allowed(i, j) {
                    let e = (v - max).exp();
                    out_row[j] = e;
                    sum += e;
                } else {
                    out_row[j] = S::zero();
                }
            }
            let inv = S::one() / sum;
            for ov in out_row.iter_mut() {
                *ov = *ov * inv;
            }
        }
    }
    Ok(())
}

/// Softmax Jacobian-vector product per row: `dx = s * (g - <g, s>)`.
/// Masked entries have `s = 0`, so their gradient is zero without special
/// casing.
pub fn softmax_rows_grad<S: Scalar>(g: &[S], probs: &[S], batch: usize, t: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); g.len()];
    for b in 0..batch {
        for i in 0..t {
            let base = b * t * t + i * t;
            let g_row = &g[base..base + t];
            let p_row = &probs[base..base + t];
            let dot = g_row
                .iter()
                .zip(p_row.iter())
                .map(|(&gv, &pv)| gv * pv)
                .sum::<S>();
            let dx_row = &mut dx[base..base + t];
            for j in 0..t {
                dx_row[j] = p_row[j] * (g_row[j] - dot);
            }
        }
    }
    dx
}

/// `out[i, col+u] = sum_j probs[h, i, j] * v[j, col+u]` per head.
pub fn attn_context<S: Scalar>(p: &[S], v: &[S], t: usize, d: usize, h: usize, out: &mut [S]) {
    let dh = d / h;
    for hd in 0..h {
        let col = hd * dh;
        for i in 0..t {
            let p_row = &p[hd * t * t + i * t..hd * t * t + (i + 1) * t];
            for (j, &pv) in p_row.iter().enumerate() {
                if pv == S::zero() {
                    continue;
                }
                let v_slice = &v[j * d + col..j * d + col + dh];
                let out_slice = &mut out[i * d + col..i * d + col + dh];
                for (ov, &vv) in out_slice.iter_mut().zip(v_slice) {
                    *ov += pv * vv;
                }
            }
        }
    }
}

pub fn attn_context_grad_probs<S: Scalar>(
    g: &[S],
    v: &[S],
    t: usize,
    d: usize,
    h: usize,
) -> Vec<S> {
    let dh = d / h;
    let mut dp = vec![S::zero(); h * t * t];
    for hd in 0..h {
        let col = hd * dh;
        for i in 0..t {
            let g_slice = &g[i * d + col..i * d + col + dh];
            let dp_row = &mut dp[hd * t * t + i * t..hd * t * t + (i + 1) * t];
            for (j, dv) in dp_row.iter_mut().enumerate() {
                let v_slice = &v[j * d + col..j * d + col + dh];
                let mut acc = S::zero();
                for (&gv, &vv) in g_slice.iter().zip(v_slice) {
                    acc += gv * vv;
                }
                *dv = acc;
            }
        }
    }
    dp
}

pub fn attn_context_grad_v<S: Scalar>(g: &[S], p: &[S], t: usize, d: usize, h: usize) -> Vec<S> {
    let dh = d / h;
    let mut dv = vec![S::zero(); t * d];
    for hd in 0..h {
        let col = hd * dh;
        for i in 0..t {
            let p_row = &p[hd * t * t + i * t..hd * t * t + (i + 1) * t];
            let g_slice = &g[i * d + col..i * d + col + dh];
            for (j, &pv) in p_row.iter().enumerate() {
                if pv == S::zero() {
                    continue;
                }
                let dv_slice = &mut dv[j * d + col..j * d + col + dh];
                for (dvv, &gv) in dv_slice.iter_mut().zip(g_slice) {
                    *dvv += pv * gv;
                }
            }
        }
    }
    dv
}

/// Mean weighted BCE over a `[t x c]` logit block against one target row.
pub fn bce_with_logits<S: Scalar>(logits: &[S], y: &[S], w: &[S], t: usize, c: usize) -> S {
    let mut acc = S::zero();
    for row in 0..t {
        for cls in 0..c {
            let x = logits[row * c + cls];
            let yc = y[cls];
            acc += w[cls] * (yc * softplus(-x) + (S::one() - yc) * softplus(x));
        }
    }
    acc / S::from_f64((t * c) as f64)
}

pub fn bce_with_logits_grad<S: Scalar>(
    gscale: S,
    logits: &[S],
    y: &[S],
    w: &[S],
    t: usize,
    c: usize,
) -> Vec<S> {
    let norm = gscale / S::from_f64((t * c) as f64);
    let mut dl = vec![S::zero(); t * c];
    for row in 0..t {
        for cls in 0..c {
            let x = logits[row * c + cls];
            dl[row * c + cls] = norm * w[cls] * (sigmoid(x) - y[cls]);
        }
    }
    dl
}
