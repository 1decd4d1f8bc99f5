use evolve_core::cohort::{generate, split, CohortConfig};
use evolve_core::logreg::{featurize, LogRegModel, PenaltyConfig};
use evolve_core::metrics::{auroc, per_class_auroc, Averaging, ScoreMatrix};

#[test]
fn probe_logreg_signal() {
    let t0 = std::time::Instant::now();
    let cfg = CohortConfig::standard();
    let dataset = generate(&cfg, 42).unwrap();
    let sp = split(&dataset, 42).unwrap();
    println!("generated in {:?}", t0.elapsed());
    let none = cfg.none_class();
    let none_rate = dataset.iter().filter(|p| p.labels.get(none)).count() as f64 / dataset.len() as f64;
    println!("none prevalence {:.3}", none_rate);
    for c in 0..cfg.n_classes {
        let prev = dataset.iter().filter(|p| p.labels.get(c)).count() as f64 / dataset.len() as f64;
        println!("class {c} prevalence {:.4}", prev);
    }
    let train: Vec<_> = sp.train.iter().map(|&id| &dataset[id as usize]).collect();
    let test: Vec<_> = sp.test.iter().map(|&id| &dataset[id as usize]).collect();
    let feats: Vec<_> = train.iter().map(|p| featurize(p, cfg.forecast_start_year, cfg.vocab_size())).collect();
    let labels: Vec<_> = train.iter().map(|p| p.labels.clone()).collect();
    let t1 = std::time::Instant::now();
    let model = LogRegModel::fit_ovr(&feats, &labels, PenaltyConfig::default()).unwrap();
    println!("logreg fit in {:?}, unconverged: {:?}", t1.elapsed(), model.unconverged_classes());
    let mut scores = Vec::new();
    let mut lab = Vec::new();
    for p in &test {
        let f = featurize(p, cfg.forecast_start_year, cfg.vocab_size());
        scores.extend(model.predict_proba(&f).unwrap());
        lab.extend(p.labels.iter());
    }
    let m = ScoreMatrix::new(scores, lab, test.len(), cfg.n_classes).unwrap();
    let macro_auc = auroc(&m, Averaging::Macro).unwrap();
    println!("logreg macro AUROC {:.4} (excluded {:?})", macro_auc.value, macro_auc.excluded_classes);
    let micro = auroc(&m, Averaging::Micro).unwrap();
    println!("logreg micro AUROC {:.4}", micro.value);
    for (c, v) in per_class_auroc(&m).iter().enumerate() {
        println!("  class {c} auroc {:?}", v.map(|x| (x * 1e4).round() / 1e4));
    }
}

#[test]
fn probe_evolve_training() {
    use evolve_core::cohort::{to_input_sequence, SequenceLimits};
    use evolve_core::model::{Mode, Model, ModelConfig};
    use evolve_core::train::{fit, LabeledSequence, TrainConfig};

    let cfg = CohortConfig::standard();
    let dataset = generate(&cfg, 42).unwrap();
    let sp = split(&dataset, 42).unwrap();
    let model_cfg = ModelConfig {
        d_model: 48,
        n_heads: 4,
        n_layers: 2,
        max_seq_len: 96,
        vocab_size: cfg.vocab_size(),
        n_ages: 70,
        n_t2f: 70,
        n_classes: cfg.n_classes,
        dropout: 0.1,
        mode: Mode::Evolve,
    };
    let limits = SequenceLimits::from(&model_cfg);
    let build = |ids: &[u64]| -> Vec<LabeledSequence> {
        ids.iter()
            .map(|&id| {
                let p = &dataset[id as usize];
                let (seq, _) = to_input_sequence(p, cfg.forecast_start_year, cfg.buffer_years, &limits).unwrap();
                LabeledSequence { person_id: id, seq, labels: p.labels.clone() }
            })
            .collect()
    };
    let train_set = build(&sp.train);
    let valid_set = build(&sp.valid);
    let test_set = build(&sp.test);
    let tlen: usize = train_set.iter().map(|s| s.seq.len()).sum();
    println!("mean train T = {:.1}", tlen as f64 / train_set.len() as f64);

    let mut model: Model<f32> = Model::new(model_cfg.clone(), 42).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        warmup_frac: 0.05,
        lr_floor_frac: 0.1,
        batch_size: 64,
        max_epochs: 20,
        early_stop_patience: 5,
        none_downsample_rate: 0.25,
        class_weights: None,
        none_class: None,
        weight_decay: 0.01,
        grad_clip: 1.0,
        seed: 42,
    };
    let t0 = std::time::Instant::now();
    let result = fit(&mut model, &train_set, &valid_set, &tc).unwrap();
    println!("trained {} epochs in {:?}", result.epochs_run, t0.elapsed());
    for s in &result.history {
        println!("epoch {} train {:.4} valid {:.4} lr {:.2e}", s.epoch, s.train_loss, s.valid_loss, s.lr);
    }

    // score test split: last-position row
    use rayon::prelude::*;
    let t1 = std::time::Instant::now();
    let rows: Vec<Vec<f64>> = test_set
        .par_iter()
        .map(|item| {
            let series = model.forward(&item.seq).unwrap();
            series.last_row().iter().map(|&v| v as f64).collect()
        })
        .collect();
    println!("test forward in {:?}", t1.elapsed());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (item, row) in test_set.iter().zip(rows) {
        scores.extend(row);
        labels.extend(item.labels.iter());
    }
    let m = ScoreMatrix::new(scores, labels, test_set.len(), cfg.n_classes).unwrap();
    let macro_auc = auroc(&m, Averaging::Macro).unwrap();
    println!("evolve macro AUROC {:.4}", macro_auc.value);
    for (c, v) in per_class_auroc(&m).iter().enumerate() {
        println!("  class {c} auroc {:?}", v.map(|x| (x * 1e4).round() / 1e4));
    }
}
