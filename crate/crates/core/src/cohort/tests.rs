use super::*;
use tempfile::tempdir;

fn one_trigger_cfg(multiplier: f64) -> CohortConfig {
    CohortConfig {
        n_persons: 20_000,
        code_types: vec![CodeTypeSpec {
            name: "codes".into(),
            count: 50,
        }],
        n_classes: 3,
        history_years: 60.0,
        min_age_at_forecast: 5.0,
        forecast_years: 5.0,
        buffer_years: 0.25,
        forecast_start_year: 2016.0,
        base_event_rate: 0.5,
        event_rate_age_slope: 0.0,
        palette_size: 4,
        palette_weight: 0.5,
        diagnosis_base_hazard: vec![0.004],
        diagnosis_age_log_slope: 0.0,
        death_base_hazard: 1e-4,
        death_age_log_slope: 0.0,
        triggers: vec![TriggerSpec {
            class: 0,
            code: 5,
            multiplier,
            plant_prob: 0.3,
        }],
        trigger_min_age: 1.0,
        shock: None,
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let cfg = one_trigger_cfg(4.0);
    let mut small = cfg.clone();
    small.n_persons = 200;
    let a = generate(&small, 7).unwrap();
    let b = generate(&small, 7).unwrap();
    assert_eq!(a, b);
    let dir = tempdir().unwrap();
    let pa = dir.path().join("a.jsonl");
    let pb = dir.path().join("b.jsonl");
    save_jsonl(&a, &pa).unwrap();
    save_jsonl(&b, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let c = generate(&small, 8).unwrap();
    assert_ne!(a, c, "different seeds give different cohorts");
}

#[test]
fn labels_are_none_xor_outcomes() {
    let cfg = CohortConfig::standard();
    let mut small = cfg.clone();
    small.n_persons = 2_000;
    let persons = generate(&small, 11).unwrap();
    let none = small.none_class();
    for p in &persons {
        let others = (0..small.n_classes - 1).any(|c| p.labels.get(c));
        assert_ne!(p.labels.get(none), others, "none XOR outcomes");
        assert!(!p.events.is_empty());
    }
}

#[test]
fn no_event_inside_buffer() {
    let cfg = CohortConfig::standard();
    let mut small = cfg.clone();
    small.n_persons = 1_000;
    let persons = generate(&small, 12).unwrap();
    for p in &persons {
        let cutoff = p.age_at_forecast(small.forecast_start_year) - small.buffer_years;
        for e in &p.events {
            assert!(e.age < cutoff, "event at {} vs cutoff {cutoff}", e.age);
        }
    }
}

#[test]
fn unit_multiplier_keeps_trigger_group_at_base_rate() {
    let cfg = one_trigger_cfg(1.0);
    let persons = generate(&cfg, 13).unwrap();
    let (mut n1, mut k1, mut n0, mut k0) = (0f64, 0f64, 0f64, 0f64);
    for p in &persons {
        let has_trigger = p.events.iter().any(|e| e.code == 5);
        let labeled = p.labels.get(0);
        if has_trigger {
            n1 += 1.0;
            k1 += labeled as u8 as f64;
        } else {
            n0 += 1.0;
            k0 += labeled as u8 as f64;
        }
    }
    let (p1, p0) = (k1 / n1, k0 / n0);
    let pooled = (k1 + k0) / (n1 + n0);
    let sigma = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n0)).sqrt();
    assert!(
        (p1 - p0).abs() <= 3.0 * sigma,
        "p1 {p1:.4} vs p0 {p0:.4}, 3 sigma {:.4}",
        3.0 * sigma
    );
}

#[test]
fn multiplier_eight_lifts_conditional_rate_into_band() {
    let mut cfg = one_trigger_cfg(8.0);
    cfg.triggers[0].plant_prob = 0.3;
    let persons = generate(&cfg, 14).unwrap();
    let (mut n1, mut k1, mut n0, mut k0) = (0f64, 0f64, 0f64, 0f64);
    for p in &persons {
        let has_trigger = p.events.iter().any(|e| e.code == 5);
        let labeled = p.labels.get(0);
        if has_trigger {
            n1 += 1.0;
            k1 += labeled as u8 as f64;
        } else {
            n0 += 1.0;
            k0 += labeled as u8 as f64;
        }
    }
    let ratio = (k1 / n1) / (k0 / n0);
    assert!(
        (4.0..=12.0).contains(&ratio),
        "empirical risk ratio {ratio:.2} outside [4, 12]"
    );
}

#[test]
fn split_small_and_large_sizes() {
    assert_eq!(split_sizes(10), (7, 1, 2));
    let (tr, va, te) = split_sizes(5_173_795);
    assert!((tr as i64 - 3_621_657).abs() <= 1);
    assert!((va as i64 - 517_379).abs() <= 1);
    assert!((te as i64 - 1_034_759).abs() <= 1);
    assert_eq!(tr + va + te, 5_173_795);
}

#[test]
fn split_is_disjoint_exhaustive_and_deterministic() {
    let mut cfg = one_trigger_cfg(1.0);
    cfg.n_persons = 100;
    let persons = generate(&cfg, 15).unwrap();
    let s1 = split(&persons, 42).unwrap();
    let s2 = split(&persons, 42).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.train.len(), 70);
    assert_eq!(s1.valid.len(), 10);
    assert_eq!(s1.test.len(), 20);
    let mut all: Vec<u64> = s1
        .train
        .iter()
        .chain(&s1.valid)
        .chain(&s1.test)
        .copied()
        .collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 100, "parts are disjoint and exhaustive");
    let s3 = split(&persons, 43).unwrap();
    assert_ne!(s1, s3);
}

#[test]
fn split_requires_ten_persons() {
    let mut cfg = one_trigger_cfg(1.0);
    cfg.n_persons = 9;
    let persons = generate(&cfg, 16).unwrap();
    assert!(split(&persons, 1).is_err());
}

fn limits() -> SequenceLimits {
    SequenceLimits {
        max_seq_len: 400,
        n_ages: 111,
        n_t2f: 111,
    }
}

fn person(events: Vec<Event>, birth_year: f64) -> PersonRecord {
    PersonRecord {
        person_id: 0,
        birth_year,
        events,
        labels: crate::labels::LabelVector::from_class_ids(&[2], 3).unwrap(),
    }
}

#[test]
fn t2f_is_floored_years_to_forecast() {
    // forecast age 40: event exactly one year before => t2f 1
    let p = person(
        vec![
            Event { code: 1, age: 39.0 },
            Event { code: 2, age: 39.6 },
        ],
        1976.0,
    );
    let (seq, stats) = to_input_sequence(&p, 2016.0, 0.25, &limits()).unwrap();
    assert_eq!(seq.t2f(), &[1, 0]);
    assert_eq!(seq.ages(), &[39, 39]);
    assert_eq!(stats.total(), 0);
}

#[test]
fn same_age_events_keep_order() {
    let p = person(
        vec![
            Event { code: 7, age: 20.25 },
            Event { code: 3, age: 20.25 },
            Event { code: 9, age: 20.75 },
        ],
        1980.0,
    );
    let (seq, _) = to_input_sequence(&p, 2016.0, 0.25, &limits()).unwrap();
    assert_eq!(seq.codes(), &[7, 3, 9]);
    assert_eq!(seq.ages(), &[20, 20, 20]);
}

#[test]
fn long_history_keeps_most_recent_events() {
    let events: Vec<Event> = (0..450)
        .map(|i| Event {
            code: i,
            age: i as f64 * 0.08,
        })
        .collect();
    let p = person(events, 1976.0);
    let (seq, _) = to_input_sequence(&p, 2016.0, 0.25, &limits()).unwrap();
    assert_eq!(seq.len(), 400);
    assert_eq!(seq.codes()[0], 50, "oldest 50 dropped");
    assert_eq!(seq.codes()[399], 449);
}

#[test]
fn event_inside_buffer_is_a_data_error() {
    let p = person(vec![Event { code: 1, age: 39.9 }], 1976.0);
    let err = to_input_sequence(&p, 2016.0, 0.25, &limits());
    assert!(matches!(err, Err(CohortError::Data(_))));
}

#[test]
fn out_of_range_values_clip_with_counts() {
    let mut lim = limits();
    lim.n_ages = 30;
    lim.n_t2f = 5;
    let p = person(
        vec![
            Event { code: 1, age: 2.0 },
            Event { code: 1, age: 35.0 },
        ],
        1976.0,
    );
    let (seq, stats) = to_input_sequence(&p, 2016.0, 0.25, &lim).unwrap();
    assert_eq!(seq.ages(), &[2, 29]);
    assert_eq!(seq.t2f(), &[4, 4]);
    assert_eq!(stats.ages_clipped, 1);
    assert_eq!(stats.t2f_clipped, 2);
}

#[test]
fn jsonl_round_trip_is_lossless() {
    let mut cfg = one_trigger_cfg(2.0);
    cfg.n_persons = 300;
    let persons = generate(&cfg, 17).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("cohort.jsonl");
    save_jsonl(&persons, &path).unwrap();
    let (loaded, report) = load_jsonl(&path, cfg.n_classes).unwrap();
    assert_eq!(persons, loaded);
    assert_eq!(report.n_persons, 300);
    assert_eq!(report.unknown_fields, 0);
    // second save of the loaded data is byte-identical
    let path2 = dir.path().join("cohort2.jsonl");
    save_jsonl(&loaded, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn jsonl_rejects_empty_events_and_reports_line() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"person_id\":0,\"birth_year\":1980.0,\"events\":[[1,2.0]],\"labels\":[2]}\n\
         {\"person_id\":1,\"birth_year\":1980.0,\"events\":[],\"labels\":[2]}\n",
    )
    .unwrap();
    match load_jsonl(&path, 3) {
        Err(CohortError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn jsonl_malformed_line_reports_line_number() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"person_id\":0,\"birth_year\":1980.0,\"events\":[[1,2.0]],\"labels\":[2]}\nnot json\n",
    )
    .unwrap();
    match load_jsonl(&path, 3) {
        Err(CohortError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn jsonl_unknown_fields_are_counted_not_fatal() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("fwd.jsonl");
    std::fs::write(
        &path,
        "{\"person_id\":0,\"birth_year\":1980.0,\"events\":[[1,2.0]],\"labels\":[2],\"future_field\":true}\n",
    )
    .unwrap();
    let (persons, report) = load_jsonl(&path, 3).unwrap();
    assert_eq!(persons.len(), 1);
    assert_eq!(report.unknown_fields, 1);
}

#[test]
fn jsonl_rejects_inconsistent_none() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"person_id\":0,\"birth_year\":1980.0,\"events\":[[1,2.0]],\"labels\":[0,2]}\n",
    )
    .unwrap();
    assert!(load_jsonl(&path, 3).is_err());
}

#[test]
fn shock_members_are_detectable() {
    let cfg = CohortConfig::standard();
    let mut small = cfg.clone();
    small.n_persons = 5_000;
    let persons = generate(&small, 18).unwrap();
    let shock = small.shock.as_ref().unwrap();
    let members = shock_member_ids(&persons, shock);
    // eligibility ~ P(age_f >= 42) * prob = (18/55) * 0.03 of 5000 = ~49
    assert!(
        members.len() > 20 && members.len() < 120,
        "unexpected shock group size {}",
        members.len()
    );
    let pool: std::collections::HashSet<usize> = shock.codes.iter().copied().collect();
    for id in &members {
        let p = &persons[*id as usize];
        let burst = p
            .events
            .iter()
            .filter(|e| pool.contains(&e.code) && e.age >= shock.age && e.age < shock.age + 1.0)
            .count();
        assert_eq!(burst, shock.n_codes, "full burst present");
    }
}

#[test]
fn standard_cohort_prevalence_is_skewed_to_none() {
    let mut cfg = CohortConfig::standard();
    cfg.n_persons = 4_000;
    let persons = generate(&cfg, 19).unwrap();
    let none = cfg.none_class();
    let none_rate =
        persons.iter().filter(|p| p.labels.get(none)).count() as f64 / persons.len() as f64;
    assert!(
        (0.70..=0.88).contains(&none_rate),
        "none prevalence {none_rate:.3} outside the intended skew"
    );
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = one_trigger_cfg(1.0);
    cfg.triggers[0].code = 50; // vocab is 50, ids end at 49
    assert!(matches!(generate(&cfg, 1), Err(CohortError::Config(_))));
    let mut cfg = one_trigger_cfg(1.0);
    cfg.n_persons = 0;
    assert!(generate(&cfg, 1).is_err());
    let mut cfg = one_trigger_cfg(1.0);
    cfg.diagnosis_base_hazard = vec![0.1, 0.1];
    assert!(generate(&cfg, 1).is_err());
}

