use super::*;
use crate::rng::rng_for;
use proptest::prelude::*;
use rand::Rng;

// ── Independent oracles (brute force; never share code with the sweep
//    implementations above) ─────────────────────────────────────────────

fn auroc_pairwise_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut acc = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                acc += 1.0;
            } else if p == n {
                acc += 0.5;
            }
        }
    }
    Some(acc / (pos.len() * neg.len()) as f64)
}

fn ap_threshold_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for tau in thresholds {
        let mut tp = 0;
        let mut fp = 0;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= tau {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn random_matrix(seed: u64, n: usize, c: usize, tie_grid: bool) -> ScoreMatrix {
    let mut rng = rng_for(seed, 77, 0);
    let scores: Vec<f64> = (0..n * c)
        .map(|_| {
            if tie_grid {
                (rng.gen_range(0..=10) as f64) / 10.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    let labels: Vec<bool> = (0..n * c).map(|_| rng.gen::<f64>() < 0.3).collect();
    ScoreMatrix::new(scores, labels, n, c).unwrap()
}

#[test]
fn auroc_perfect_and_constant() {
    let m = ScoreMatrix::new(vec![0.9, 0.8, 0.2, 0.1], vec![true, true, false, false], 4, 1)
        .unwrap();
    assert_eq!(auroc(&m, Averaging::Micro).unwrap().value, 1.0);
    let m = ScoreMatrix::new(vec![0.5; 4], vec![true, true, false, false], 4, 1).unwrap();
    assert_eq!(auroc(&m, Averaging::Micro).unwrap().value, 0.5);
}

#[test]
fn auroc_matches_pairwise_oracle_with_ties() {
    for case in 0..40 {
        let m = random_matrix(case, 20, 1, case % 2 == 0);
        let (scores, labels) = m.class_column(0);
        if let Some(expected) = auroc_pairwise_oracle(&scores, &labels) {
            let got = binary_auroc(&scores, &labels).unwrap();
            assert!(
                (got - expected).abs() < 1e-12,
                "case {case}: {got} vs {expected}"
            );
        }
    }
}

#[test]
fn auprc_closed_forms() {
    // all positives ranked first
    let m = ScoreMatrix::new(
        vec![0.9, 0.8, 0.4, 0.2],
        vec![true, true, false, false],
        4,
        1,
    )
    .unwrap();
    assert_eq!(auprc(&m, Averaging::Micro).unwrap().value, 1.0);
    // single positive ranked k-th of n: AP = 1/k
    for k in 1..=5usize {
        let n = 5;
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 * 0.1).collect();
        let labels: Vec<bool> = (0..n).map(|i| i == k - 1).collect();
        let ap = binary_average_precision(&scores, &labels).unwrap();
        assert!((ap - 1.0 / k as f64).abs() < 1e-12, "k={k}: {ap}");
    }
}

#[test]
fn auprc_matches_threshold_oracle_with_ties() {
    for case in 0..40 {
        let m = random_matrix(1000 + case, 20, 1, case % 2 == 0);
        let (scores, labels) = m.class_column(0);
        if let Some(expected) = ap_threshold_oracle(&scores, &labels) {
            let got = binary_average_precision(&scores, &labels).unwrap();
            assert!(
                (got - expected).abs() < 1e-12,
                "case {case}: {got} vs {expected}"
            );
        }
    }
}

#[test]
fn recall_at_k_trivial_cases() {
    // C == k: everything captured
    let m = random_matrix(5, 10, 4, false);
    let r = recall_at_k(&m, 4, Averaging::Micro, &[]);
    match r {
        Ok(res) => assert_eq!(res.value, 1.0),
        Err(MetricError::Undefined(_)) => {} // no positives drawn at all
        Err(e) => panic!("{e}"),
    }
    // single person, its label ranked 5th of 6
    let scores = vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
    let labels = vec![false, false, false, false, true, false];
    let m = ScoreMatrix::new(scores, labels, 1, 6).unwrap();
    assert_eq!(recall_at_k(&m, 4, Averaging::Micro, &[]).unwrap().value, 0.0);
    assert_eq!(recall_at_k(&m, 5, Averaging::Micro, &[]).unwrap().value, 1.0);
}

#[test]
fn recall_at_k_matches_enumeration_oracle() {
    for case in 0..20 {
        let m = random_matrix(2000 + case, 10, 6, case % 2 == 0);
        let k = 3;
        // oracle: per person, explicit stable ranking
        let mut hit = 0usize;
        let mut total = 0usize;
        let mut per_class_hit = vec![0usize; 6];
        let mut per_class_tot = vec![0usize; 6];
        for i in 0..10 {
            let mut order: Vec<usize> = (0..6).collect();
            order.sort_by(|&a, &b| {
                m.score(i, b)
                    .partial_cmp(&m.score(i, a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for class in 0..6 {
                if m.label(i, class) {
                    total += 1;
                    per_class_tot[class] += 1;
                    if order[..k].contains(&class) {
                        hit += 1;
                        per_class_hit[class] += 1;
                    }
                }
            }
        }
        if total == 0 {
            continue;
        }
        let micro = recall_at_k(&m, k, Averaging::Micro, &[]).unwrap().value;
        assert!(
            (micro - hit as f64 / total as f64).abs() < 1e-12,
            "case {case}"
        );
        let macro_oracle: Vec<f64> = (0..6)
            .filter(|&c| per_class_tot[c] > 0)
            .map(|c| per_class_hit[c] as f64 / per_class_tot[c] as f64)
            .collect();
        let expected = macro_oracle.iter().sum::<f64>() / macro_oracle.len() as f64;
        let got = recall_at_k(&m, k, Averaging::Macro, &[]).unwrap().value;
        assert!((got - expected).abs() < 1e-12, "case {case} macro");
    }
}

#[test]
fn recall_excluding_a_class_drops_it_everywhere() {
    // class 1 excluded: its positives neither rank nor count
    let scores = vec![0.1, 0.9, 0.5, 0.2];
    let labels = vec![false, true, true, false];
    let m = ScoreMatrix::new(scores, labels, 1, 4).unwrap();
    let with = recall_at_k(&m, 2, Averaging::Micro, &[]).unwrap().value;
    assert_eq!(with, 1.0, "classes 1 and 2 are the top 2");
    let without = recall_at_k(&m, 2, Averaging::Micro, &[1]).unwrap().value;
    assert_eq!(without, 1.0, "class 2 still captured among remaining");
    assert!(recall_at_k(&m, 4, Averaging::Micro, &[1]).is_err(), "k > active classes");
}

#[test]
fn macro_skips_degenerate_classes_and_reports() {
    // class 1 has no positives
    let scores = vec![0.9, 0.1, 0.2, 0.3, 0.8, 0.1, 0.1, 0.9];
    let labels = vec![true, false, false, false, false, false, true, false];
    let m = ScoreMatrix::new(scores, labels, 2, 4).unwrap();
    let r = auroc(&m, Averaging::Macro).unwrap();
    assert_eq!(r.excluded_classes, vec![1, 3]);
    let r = auprc(&m, Averaging::Macro).unwrap();
    assert_eq!(r.excluded_classes, vec![1, 3]);
}

#[test]
fn micro_requires_both_outcomes() {
    let m = ScoreMatrix::new(vec![0.5, 0.4], vec![true, true], 2, 1).unwrap();
    assert!(matches!(
        auroc(&m, Averaging::Micro),
        Err(MetricError::Undefined(_))
    ));
}

#[test]
fn single_class_micro_equals_macro() {
    let m = random_matrix(42, 30, 1, false);
    let (scores, labels) = m.class_column(0);
    if auroc_pairwise_oracle(&scores, &labels).is_some() {
        let micro = auroc(&m, Averaging::Micro).unwrap().value;
        let macr = auroc(&m, Averaging::Macro).unwrap().value;
        assert!((micro - macr).abs() < 1e-15);
    }
}

#[test]
fn bootstrap_constant_metric_has_zero_std() {
    let m = random_matrix(7, 25, 2, false);
    let r = bootstrap_std(|_| Ok(0.75), &m, 50, 1).unwrap();
    assert_eq!(r.mean, 0.75);
    assert_eq!(r.std, 0.0);
    assert_eq!(r.redraws, 0);
}

#[test]
fn bootstrap_is_seed_deterministic() {
    let m = random_matrix(8, 40, 2, false);
    let f = |m: &ScoreMatrix| auroc(m, Averaging::Micro).map(|r| r.value);
    let a = bootstrap_std(f, &m, 100, 9).unwrap();
    let b = bootstrap_std(f, &m, 100, 9).unwrap();
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    assert_eq!(a.std.to_bits(), b.std.to_bits());
    let c = bootstrap_std(f, &m, 100, 10).unwrap();
    assert_ne!(a.mean.to_bits(), c.mean.to_bits());
}

#[test]
fn bootstrap_counts_redraws_on_fragile_metrics() {
    // one mid-ranked positive in 8 rows: many resamples lose it, and the
    // surviving ones rank it differently
    let scores = vec![0.35, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    let labels = vec![true, false, false, false, false, false, false, false];
    let m = ScoreMatrix::new(scores, labels, 8, 1).unwrap();
    let f = |m: &ScoreMatrix| auroc(m, Averaging::Micro).map(|r| r.value);
    let r = bootstrap_std(f, &m, 200, 3).unwrap();
    assert!(r.redraws > 0, "expected some undefined resamples");
    assert!(r.std > 0.0);
}

#[test]
fn bootstrap_rejects_single_iteration() {
    let m = random_matrix(9, 10, 1, false);
    assert!(bootstrap_std(|_| Ok(0.5), &m, 1, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_invariant_under_monotone_transforms(
        raw in prop::collection::vec((0u8..=10, any::<bool>()), 4..40)
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 10.0).collect();
        let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
        if let Some(base) = binary_auroc(&scores, &labels) {
            let exp_scores: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s + 11.0).collect();
            prop_assert!((binary_auroc(&exp_scores, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((binary_auroc(&affine, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn auroc_negation_complements_for_tie_free_scores(
        labels in prop::collection::vec(any::<bool>(), 4..40)
    ) {
        // distinct scores by construction
        let scores: Vec<f64> = (0..labels.len()).map(|i| i as f64 * 1.5 + 0.25).collect();
        if let Some(base) = binary_auroc(&scores, &labels) {
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped = binary_auroc(&negated, &labels).unwrap();
            prop_assert!((base + flipped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        raw in prop::collection::vec((0u8..=10, any::<bool>()), 8..60)
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 10.0).collect();
        let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
        let n = scores.len() / 2;
        let m = ScoreMatrix::new(scores[..n*2].to_vec(), labels[..n*2].to_vec(), n, 2).unwrap();
        for avg in [Averaging::Micro, Averaging::Macro] {
            if let Ok(r) = auroc(&m, avg) {
                prop_assert!((0.0..=1.0).contains(&r.value));
            }
            if let Ok(r) = auprc(&m, avg) {
                prop_assert!((0.0..=1.0).contains(&r.value));
            }
            if let Ok(r) = recall_at_k(&m, 1, avg, &[]) {
                prop_assert!((0.0..=1.0).contains(&r.value));
            }
        }
    }
}
