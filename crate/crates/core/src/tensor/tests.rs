use super::gradcheck::{central_difference, compare};
use super::*;
use crate::rng::rng_for;
use rand::Rng;

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

/// Finite-difference check harness: `build` recreates the graph from flat
/// parameter vectors and returns (graph, loss, leaf ids).
fn fd_check<F>(build: F, params: &[Vec<f64>]) -> f64
where
    F: Fn(&[Vec<f64>]) -> (Graph<f64>, TensorId, Vec<TensorId>),
{
    let (graph, loss, ids) = build(params);
    let grads = graph.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| grads.get(id).expect("missing gradient").to_vec())
        .collect();
    let numeric = central_difference(
        |ps| {
            let (g, l, _) = build(ps);
            g.data(l)[0]
        },
        params,
        1e-5,
    );
    compare(&analytic, &numeric).max_rel_err
}

#[test]
fn matmul_identity_returns_rhs() {
    let mut g: Graph<f64> = Graph::new();
    let eye = g.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
    let b = g.leaf(vec![3.0, -1.0, 7.5, 0.25], &[2, 2], false).unwrap();
    let c = g.matmul(eye, b).unwrap();
    assert_eq!(g.data(c), g.data(b));
}

#[test]
fn matmul_hand_case() {
    // [[1,2],[3,4]] @ [[5],[6]] = [[17],[39]]
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
    let b = g.leaf(vec![5.0, 6.0], &[2, 1], false).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[17.0, 39.0]);
}

#[test]
fn matmul_inner_dim_mismatch_errors() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
    let b = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
    assert!(matches!(
        g.matmul(a, b),
        Err(TensorError::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn softmax_symmetric_row() {
    // T=2 causal: row 1 has both entries unmasked, equal scores split evenly
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![0.0, 0.0, 0.0, 0.0], &[1, 2, 2], false).unwrap();
    let s = g
        .masked_softmax_rows(x, &AttentionMask::causal(2))
        .unwrap();
    assert_eq!(g.data(s)[2], 0.5);
    assert_eq!(g.data(s)[3], 0.5);
}

#[test]
fn softmax_single_unmasked_entry() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![0.0, 0.0, 0.0, 0.0], &[1, 2, 2], false).unwrap();
    let s = g
        .masked_softmax_rows(x, &AttentionMask::causal(2))
        .unwrap();
    // causal row 0: only position 0 admitted
    assert_eq!(g.data(s)[0], 1.0);
    assert_eq!(g.data(s)[1], 0.0);
}

#[test]
fn softmax_matches_direct_formula() {
    let raw = [1.0f64, 2.0, 3.0];
    let mut g: Graph<f64> = Graph::new();
    let x = g
        .leaf(
            vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0],
            &[1, 3, 3],
            false,
        )
        .unwrap();
    let s = g
        .masked_softmax_rows(x, &AttentionMask::full(3))
        .unwrap();
    let denom: f64 = raw.iter().map(|v| v.exp()).sum();
    let expected: Vec<f64> = raw.iter().map(|v| v.exp() / denom).collect();
    for row in 0..3 {
        assert_close(&g.data(s)[row * 3..(row + 1) * 3], &expected, 1e-12);
    }
}

#[test]
fn softmax_fully_masked_row_errors() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![0.0; 4], &[1, 2, 2], false).unwrap();
    let mask = AttentionMask::explicit(2, vec![true, false, false, false]).unwrap();
    assert!(matches!(
        g.masked_softmax_rows(x, &mask),
        Err(TensorError::FullyMaskedRow { row: 1 })
    ));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = rng_for(11, 0, 0);
    for t in [2usize, 5, 9] {
        let data: Vec<f64> = (0..2 * t * t).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data, &[2, t, t], false).unwrap();
        let s = g
            .masked_softmax_rows(x, &AttentionMask::causal(t))
            .unwrap();
        for b in 0..2 {
            for i in 0..t {
                let row = &g.data(s)[b * t * t + i * t..b * t * t + (i + 1) * t];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
                for (j, &v) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(v, 0.0, "masked entry must be exactly zero");
                    }
                }
            }
        }
    }
}

#[test]
fn sigmoid_values_and_saturation() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![0.0, 50.0, -50.0], &[1, 3], false).unwrap();
    let s = g.sigmoid(x);
    let out = g.data(s);
    assert_eq!(out[0], 0.5);
    assert!((out[1] - 1.0).abs() < 1e-15);
    assert!(out[2] < 1e-15 && out[2] > 0.0);
    // no overflow even far outside the stated range
    let y = g.leaf(vec![1e3, -1e3], &[1, 2], false).unwrap();
    let sy = g.sigmoid(y);
    assert!(g.data(sy).iter().all(|v| v.is_finite()));
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![0.0], &[1, 1], true).unwrap();
    let s = g.sigmoid(x);
    let loss = g.sum_all(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.25]);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(vec![3.0, 3.0, 3.0, 3.0], &[1, 4], false).unwrap();
    let gain = g.leaf(vec![1.0; 4], &[4], false).unwrap();
    let bias = g.leaf(vec![0.0; 4], &[4], false).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    for &v in g.data(y) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_matches_direct_computation() {
    let raw = [1.0f64, 2.0, 3.0];
    let mean = 2.0;
    let var = ((1.0f64 - 2.0).powi(2) + 0.0 + 1.0) / 3.0;
    let eps = 1e-5;
    let expected: Vec<f64> = raw.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();

    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(raw.to_vec(), &[1, 3], false).unwrap();
    let gain = g.leaf(vec![1.0; 3], &[3], false).unwrap();
    let bias = g.leaf(vec![0.0; 3], &[3], false).unwrap();
    let y = g.layer_norm(x, gain, bias, eps).unwrap();
    assert_close(g.data(y), &expected, 1e-12);
}

#[test]
fn layer_norm_output_variance_near_one() {
    let mut rng = rng_for(3, 0, 0);
    let d = 16;
    let data: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(data, &[1, d], false).unwrap();
    let gain = g.leaf(vec![1.0; d], &[d], false).unwrap();
    let bias = g.leaf(vec![0.0; d], &[d], false).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-10).unwrap();
    let out = g.data(y);
    let mean: f64 = out.iter().sum::<f64>() / d as f64;
    let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-6, "variance {var}");
}

#[test]
fn embedding_repeats_and_range_check() {
    let mut g: Graph<f64> = Graph::new();
    let table = g
        .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], false)
        .unwrap();
    let out = g.embedding_lookup(table, &[0, 0]).unwrap();
    assert_eq!(g.data(out), &[1.0, 2.0, 1.0, 2.0]);
    assert!(matches!(
        g.embedding_lookup(table, &[3]),
        Err(TensorError::IndexOutOfRange { id: 3, rows: 3 })
    ));
}

#[test]
fn embedding_backward_accumulates_repeated_ids() {
    let mut g: Graph<f64> = Graph::new();
    let table = g.leaf(vec![0.0; 8], &[4, 2], true).unwrap();
    let out = g.embedding_lookup(table, &[3, 3]).unwrap();
    let loss = g.sum_all(out);
    let grads = g.backward(loss).unwrap();
    let gt = grads.get(table).unwrap();
    assert_eq!(&gt[6..8], &[2.0, 2.0], "row 3 accumulates both positions");
    assert!(gt[..6].iter().all(|&v| v == 0.0));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g: Graph<f64> = Graph::new();
    let w = g.leaf(vec![0.3; 5], &[1, 5], true).unwrap();
    let loss = g.sum_all(w);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0; 5]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g: Graph<f64> = Graph::new();
    let w = g.leaf(vec![1.0, 2.0], &[1, 2], true).unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g: Graph<f64> = Graph::new();
    let w = g.leaf(vec![1.0, 2.0], &[1, 2], true).unwrap();
    assert!(matches!(
        g.backward(w),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn bce_with_logits_at_zero_is_ln2() {
    let mut g: Graph<f64> = Graph::new();
    let logits = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
    let loss = g
        .bce_with_logits(logits, &[1.0, 0.0, 1.0], &[1.0; 3])
        .unwrap();
    assert!((g.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn bce_hand_case() {
    // C=2, y=[1,0], p=[0.8,0.3]: (-ln 0.8 - ln 0.7)/2
    let logits: Vec<f64> = [0.8f64, 0.3]
        .iter()
        .map(|p| (p / (1.0 - p)).ln())
        .collect();
    let mut g: Graph<f64> = Graph::new();
    let l = g.leaf(logits, &[1, 2], false).unwrap();
    let loss = g.bce_with_logits(l, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
    let expected = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
    assert!((g.data(loss)[0] - expected).abs() < 1e-12);
}

#[test]
fn bce_rejects_non_finite() {
    let mut g: Graph<f64> = Graph::new();
    let l = g.leaf(vec![f64::NAN, 0.0], &[1, 2], false).unwrap();
    assert!(matches!(
        g.bce_with_logits(l, &[1.0, 0.0], &[1.0, 1.0]),
        Err(TensorError::NonFinite { .. })
    ));
}

// ── Finite-difference checks for every parameterized op ────────────────

#[test]
fn fd_matmul_bias_sigmoid() {
    let mut rng = rng_for(21, 0, 0);
    let params = vec![
        (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ];
    let err = fd_check(
        |ps| {
            let mut g: Graph<f64> = Graph::new();
            let a = g.leaf(ps[0].clone(), &[3, 2], true).unwrap();
            let b = g.leaf(ps[1].clone(), &[2, 4], true).unwrap();
            let bias = g.leaf(ps[2].clone(), &[4], true).unwrap();
            let mm = g.matmul(a, b).unwrap();
            let ba = g.bias_add(mm, bias).unwrap();
            let s = g.sigmoid(ba);
            let loss = g.sum_all(s);
            (g, loss, vec![a, b, bias])
        },
        &params,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn fd_layer_norm_gelu() {
    let mut rng = rng_for(22, 0, 0);
    let params = vec![
        (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        (0..5).map(|_| rng.gen_range(0.5..1.5)).collect(),
        (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    ];
    let err = fd_check(
        |ps| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(ps[0].clone(), &[2, 5], true).unwrap();
            let gain = g.leaf(ps[1].clone(), &[5], true).unwrap();
            let bias = g.leaf(ps[2].clone(), &[5], true).unwrap();
            let ln = g.layer_norm(x, gain, bias, 1e-5).unwrap();
            let ge = g.gelu(ln);
            let loss = g.mean_all(ge);
            (g, loss, vec![x, gain, bias])
        },
        &params,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn fd_attention_stack() {
    let (t, d, h) = (4usize, 6usize, 2usize);
    let mut rng = rng_for(23, 0, 0);
    let params = vec![
        (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ];
    let err = fd_check(
        |ps| {
            let mut g: Graph<f64> = Graph::new();
            let q = g.leaf(ps[0].clone(), &[t, d], true).unwrap();
            let k = g.leaf(ps[1].clone(), &[t, d], true).unwrap();
            let v = g.leaf(ps[2].clone(), &[t, d], true).unwrap();
            let scores = g.attn_scores(q, k, h).unwrap();
            let probs = g
                .masked_softmax_rows(scores, &AttentionMask::causal(t))
                .unwrap();
            let ctx = g.attn_context(probs, v, h).unwrap();
            let s = g.sigmoid(ctx);
            let loss = g.mean_all(s);
            (g, loss, vec![q, k, v])
        },
        &params,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn fd_embedding_slice_bce() {
    let mut rng = rng_for(24, 0, 0);
    let params = vec![(0..12).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()];
    let err = fd_check(
        |ps| {
            let mut g: Graph<f64> = Graph::new();
            let table = g.leaf(ps[0].clone(), &[4, 3], true).unwrap();
            let emb = g.embedding_lookup(table, &[1, 3, 1]).unwrap();
            let sliced = g.slice_rows(emb, 1, 2).unwrap();
            let loss = g
                .bce_with_logits(sliced, &[1.0, 0.0, 1.0], &[0.5, 2.0, 1.0])
                .unwrap();
            (g, loss, vec![table])
        },
        &params,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn fd_scale_mul_add() {
    let mut rng = rng_for(25, 0, 0);
    let params = vec![
        (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ];
    let err = fd_check(
        |ps| {
            let mut g: Graph<f64> = Graph::new();
            let a = g.leaf(ps[0].clone(), &[2, 3], true).unwrap();
            let b = g.leaf(ps[1].clone(), &[2, 3], true).unwrap();
            let m = g.mul(a, b).unwrap();
            let sc = g.scale(m, 1.7);
            let s = g.add(sc, a).unwrap();
            let loss = g.sum_all(s);
            (g, loss, vec![a, b])
        },
        &params,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = rng_for(31, 0, 0);
        let data: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(data, &[4, 6], false).unwrap();
        let s = g.attn_scores(x, x, 2).unwrap();
        let p = g
            .masked_softmax_rows(s, &AttentionMask::causal(4))
            .unwrap();
        let c = g.attn_context(p, x, 2).unwrap();
        g.data(c).to_vec()
    };
    assert_eq!(run(), run(), "bitwise determinism within one build");
}
