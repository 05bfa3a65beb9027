use super::*;
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::loss::prior_regularization;
use crate::model::{write_checkpoint, Architecture, ModelDims};
use crate::neuralcore::FlatParams;

fn small_fixture(seed: u64) -> PreparedData {
    let config = SyntheticConfig {
        num_seen: 4,
        num_unseen: 2,
        feature_dim: 8,
        attribute_dim: 3,
        samples_per_class: 60,
        val_per_class: 20,
        ..SyntheticConfig::default()
    }
    .with_seed(seed);
    let fx = generate_synthetic(&config).unwrap();
    PreparedData::new(&fx.dataset, &fx.attributes, &fx.split).unwrap()
}

fn small_arch() -> Architecture {
    Architecture {
        encoder_hidden: vec![32],
        decoder_hidden: vec![32],
        prior_hidden: vec![16],
        ..Architecture::default()
    }
}

fn small_model(_data: &PreparedData, seed: u64) -> SgalModel<f64> {
    let dims = ModelDims {
        feature_dim: 8,
        latent_dim: 4,
        attribute_dim: 3,
    };
    SgalModel::new(dims, &small_arch(), &mut init_rng(seed)).unwrap()
}

fn config(pretrain: usize, sgal: usize) -> TrainConfig {
    TrainConfig {
        pretrain_iterations: pretrain,
        sgal_iterations: sgal,
        seen_batch_size: 16,
        unseen_batch_size: 4,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

fn trainer(data: &PreparedData, cfg: TrainConfig) -> Trainer<f64> {
    Trainer::new(
        cfg,
        data.classes.clone(),
        data.train.clone(),
        data.validation(),
    )
    .unwrap()
}

fn checkpoint_bytes(model: &SgalModel<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, model, 6).unwrap();
    out
}

fn log_text(log: &[TrainLogRecord]) -> String {
    let mut out = Vec::new();
    write_log(&mut out, log).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn zero_pretraining_leaves_the_model_alone() {
    let data = small_fixture(0);
    let mut model = small_model(&data, 0);
    let before = model.clone();
    let mut t = trainer(&data, config(0, 0));
    t.pretrain_seen(&mut model).unwrap();
    assert_eq!(model, before);
    assert!(t.log().is_empty());
}

#[test]
fn no_sgal_iterations_returns_the_pretrained_model() {
    let data = small_fixture(1);
    let mut t = trainer(&data, config(30, 0));
    let out = t.train_sgal(small_model(&data, 1)).unwrap();
    assert_eq!(out.best, out.pretrained);
    assert_eq!(out.final_model, out.pretrained);
    assert_eq!(out.best_iteration, 30);
    assert_eq!(out.final_iteration, 30);
}

#[test]
fn log_has_one_record_per_iteration_and_evaluates_on_cadence() {
    let data = small_fixture(2);
    let mut t = trainer(&data, config(25, 17));
    let out = t.train_sgal(small_model(&data, 2)).unwrap();
    assert_eq!(out.log.len(), 42);
    for (i, r) in out.log.iter().enumerate() {
        assert_eq!(r.iteration, i + 1);
        assert_eq!(r.phase, if i < 25 { Phase::Pretrain } else { Phase::Sgal });
        let due = r.iteration % 10 == 0;
        assert_eq!(r.seen_top1.is_some(), due, "iteration {}", r.iteration);
        assert_eq!(r.unseen_top1.is_some(), due);
        assert_eq!(r.harmonic.is_some(), due);
        assert!(r.loss.is_finite());
        assert_eq!(r.wall_ms, 0);
    }
}

#[test]
fn log_csv_layout() {
    let data = small_fixture(3);
    let mut t = trainer(&data, config(10, 0));
    let out = t.train_sgal(small_model(&data, 3)).unwrap();
    let text = log_text(&out.log);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 11);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first.len(), 10);
    assert_eq!(first[0], "1");
    assert_eq!(first[1], "pretrain");
    assert_eq!(&first[6..9], &["", "", ""]);
    // 9 significant digits
    let mantissa = first[2].split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').replace('.', "").len(), 9);
    let last: Vec<&str> = lines[10].split(',').collect();
    assert!(last[6].parse::<f64>().unwrap() >= 0.0);
    assert!(last[8].parse::<f64>().is_ok());
}

#[test]
fn pseudo_rows_carry_the_label_of_their_attribute() {
    let data = small_fixture(4);
    let model = small_model(&data, 4);
    let cfg = config(0, 1);
    let unseen = &data.classes.unseen;
    let mut rng = init_rng(99);
    let mut replay = rng.clone();
    let batch = pseudo_unseen_batch(&model, unseen, &cfg, &mut rng).unwrap();
    assert_eq!(batch.len(), 4);

    let picks: Vec<usize> = (0..4)
        .map(|_| replay.random_range(0..unseen.len()))
        .collect();
    let expected: Vec<Label> = picks.iter().map(|&i| unseen.labels()[i]).collect();
    assert_eq!(batch.labels, expected);
    let attrs = unseen.attributes().select(Axis(0), &picks);
    let again = model
        .generate(
            attrs.view(),
            1,
            false,
            GenerationOptions::default(),
            &mut replay,
        )
        .unwrap();
    assert_eq!(batch.features, again.features);
}

#[test]
fn dropout_generation_adds_l_rows_per_label() {
    let data = small_fixture(5);
    let mut model = small_model(&data, 5);
    let cfg = TrainConfig {
        dropout_generation: true,
        samples_per_latent: 5,
        ..config(0, 1)
    };
    let mut t = trainer(&data, cfg);
    let mut opt = ModelOptimizer::new(&model, t.config().sgal_adam()).unwrap();
    let step = t.sgal_step(&mut model, &mut opt).unwrap();
    assert_eq!(step.batch_size, 16 + 5 * 4);
    assert_eq!(step.pseudo.len(), 20);
    for group in step.pseudo.labels.chunks(5) {
        assert!(group.iter().all(|l| *l == group[0]));
        assert!(data.classes.unseen.contains(group[0]));
    }
}

#[test]
fn pseudo_features_come_from_the_model_before_the_update() {
    let data = small_fixture(6);
    let mut model = small_model(&data, 6);
    let mut t = trainer(&data, config(0, 1));
    let before = model.clone();
    let mut replay = t.rng_mut().clone();
    let mut opt = ModelOptimizer::new(&model, t.config().sgal_adam()).unwrap();
    let step = t.sgal_step(&mut model, &mut opt).unwrap();
    assert_ne!(model, before);

    seen_minibatch(&data.train, 16, &mut replay).unwrap();
    let regenerated =
        pseudo_unseen_batch(&before, &data.classes.unseen, t.config(), &mut replay).unwrap();
    assert_eq!(regenerated, step.pseudo);
}

#[test]
fn sgal_regularizer_spans_seen_and_unseen_classes() {
    let data = small_fixture(7);
    let mut model = small_model(&data, 7);
    let mut t = trainer(&data, config(0, 2));
    let mut opt = ModelOptimizer::new(&model, t.config().sgal_adam()).unwrap();
    let margin = t.config().objective(4).margin;
    for _ in 0..2 {
        let all_means = model
            .prior_mean_eval(data.classes.all.attributes().view())
            .unwrap();
        let seen_means = model
            .prior_mean_eval(data.classes.seen.attributes().view())
            .unwrap();
        let step = t.sgal_step(&mut model, &mut opt).unwrap();
        let over_all = prior_regularization(all_means.view(), margin).unwrap();
        assert!((step.loss.prior_regularization - over_all).abs() < 1e-12);
        let over_seen = prior_regularization(seen_means.view(), margin).unwrap();
        assert!((over_all - over_seen).abs() > 1e-9);
    }
}

#[test]
fn pretraining_regularizer_covers_seen_classes_only() {
    let data = small_fixture(8);
    let mut model = small_model(&data, 8);
    let seen_means = model
        .prior_mean_eval(data.classes.seen.attributes().view())
        .unwrap();
    let mut t = trainer(&data, config(1, 0));
    t.pretrain_seen(&mut model).unwrap();
    let expected = prior_regularization(seen_means.view(), t.config().objective(4).margin).unwrap();
    assert!((t.log()[0].loss.prior_regularization - expected).abs() < 1e-12);
}

#[test]
fn same_seed_same_run() {
    let data = small_fixture(9);
    let cfg = TrainConfig {
        seed: 5,
        dropout_generation: true,
        ..config(20, 20)
    };
    let a = trainer(&data, cfg.clone())
        .train_sgal(small_model(&data, 5))
        .unwrap();
    let b = trainer(&data, cfg.clone())
        .train_sgal(small_model(&data, 5))
        .unwrap();
    assert_eq!(log_text(&a.log), log_text(&b.log));
    assert_eq!(checkpoint_bytes(&a.best), checkpoint_bytes(&b.best));
    assert_eq!(
        checkpoint_bytes(&a.final_model),
        checkpoint_bytes(&b.final_model)
    );

    let c = trainer(&data, TrainConfig { seed: 6, ..cfg })
        .train_sgal(small_model(&data, 5))
        .unwrap();
    assert_ne!(log_text(&a.log), log_text(&c.log));
}

#[test]
fn branching_after_pretraining_matches_a_full_run() {
    let data = small_fixture(10);
    let cfg = config(20, 20);
    let full = trainer(&data, cfg.clone())
        .train_sgal(small_model(&data, 0))
        .unwrap();

    let mut t = trainer(&data, cfg);
    let mut model = small_model(&data, 0);
    t.pretrain_seen(&mut model).unwrap();
    let mut branch = t.clone();
    branch.config_mut().dropout_generation = true;
    branch.sgal_phase(model.clone()).unwrap();
    let plain = t.sgal_phase(model).unwrap();
    assert_eq!(plain.final_model, full.final_model);
    assert_eq!(plain.best, full.best);
    assert_eq!(log_text(&plain.log), log_text(&full.log));
}

#[test]
fn best_model_has_the_highest_validation_h() {
    let data = small_fixture(11);
    let mut t = trainer(&data, config(40, 60));
    let out = t.train_sgal(small_model(&data, 11)).unwrap();
    let h = |m: &SgalModel<f64>| t.validate(m).unwrap().unwrap().harmonic.unwrap();
    let best = h(&out.best);
    assert!(best >= h(&out.pretrained));
    for r in out.log.iter().filter(|r| r.phase == Phase::Sgal) {
        if let Some(logged) = r.harmonic {
            assert!(best >= logged);
        }
    }
    let at_best = out
        .log
        .iter()
        .find(|r| r.iteration == out.best_iteration)
        .unwrap();
    if out.best_iteration > 40 {
        assert_eq!(at_best.harmonic, Some(best));
    }
}

#[test]
fn without_unseen_validation_the_final_model_is_returned() {
    let data = small_fixture(12);
    let seen: BTreeSet<Label> = data.classes.seen.labels().iter().copied().collect();
    let val = data.validation.filter_labels(&seen);
    let mut t = Trainer::new(
        config(10, 20),
        data.classes.clone(),
        data.train.clone(),
        Some(&val),
    )
    .unwrap();
    let out = t.train_sgal(small_model(&data, 12)).unwrap();
    assert_eq!(out.best, out.final_model);
    assert_eq!(out.best_iteration, 30);
    let evaluated: Vec<&TrainLogRecord> =
        out.log.iter().filter(|r| r.seen_top1.is_some()).collect();
    assert_eq!(evaluated.len(), 3);
    assert!(evaluated
        .iter()
        .all(|r| r.harmonic.is_none() && r.unseen_top1.is_none()));
}

#[test]
fn divergence_stops_training_with_the_iteration() {
    let data = small_fixture(13);
    let mut model = small_model(&data, 13);
    for i in 0..model.num_params() {
        model.set_param(i, 1e150);
    }
    let mut t = trainer(&data, config(5, 5));
    match t.train_sgal(model) {
        Err(Error::Training { iteration, .. }) => assert_eq!(iteration, 1),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn huge_learning_rate_diverges() {
    let data = small_fixture(14);
    let cfg = TrainConfig {
        adam: AdamConfig {
            learning_rate: 1e200,
            ..AdamConfig::default()
        },
        ..config(50, 0)
    };
    let err = trainer(&data, cfg)
        .train_sgal(small_model(&data, 14))
        .unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err}");
}

#[test]
fn bad_configs_are_rejected() {
    let data = small_fixture(15);
    for cfg in [
        TrainConfig {
            seen_batch_size: 0,
            ..config(1, 1)
        },
        TrainConfig {
            unseen_batch_size: 0,
            ..config(1, 1)
        },
        TrainConfig {
            samples_per_latent: 0,
            ..config(1, 1)
        },
        TrainConfig {
            eval_every: 0,
            ..config(1, 1)
        },
        TrainConfig {
            margin: Some(-1.0),
            ..config(1, 1)
        },
        TrainConfig {
            sgal_learning_rate: Some(0.0),
            ..config(1, 1)
        },
    ] {
        let err = Trainer::new(cfg, data.classes.clone(), data.train.clone(), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
    // N only matters once SGAL runs.
    let cfg = TrainConfig {
        unseen_batch_size: 0,
        ..config(1, 0)
    };
    assert!(Trainer::new(cfg, data.classes.clone(), data.train.clone(), None).is_ok());
}

#[test]
fn unseen_rows_in_training_data_are_rejected() {
    let data = small_fixture(16);
    let err = Trainer::new(
        config(1, 1),
        data.classes.clone(),
        data.test_unseen.clone(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn pretraining_fits_seen_classes() {
    let config_fx = SyntheticConfig {
        num_seen: 4,
        num_unseen: 2,
        feature_dim: 8,
        attribute_dim: 3,
        samples_per_class: 60,
        val_per_class: 20,
        noise_std: 0.1,
        ..SyntheticConfig::default()
    }
    .with_seed(17);
    let fx = generate_synthetic(&config_fx).unwrap();
    let data = PreparedData::new(&fx.dataset, &fx.attributes, &fx.split).unwrap();
    let raw_test = fx.dataset.select_ids(&fx.split.test_seen).unwrap();
    let oracle =
        crate::data::bayes_oracle_accuracy(&fx.ground_truth, &raw_test, &fx.split.seen).unwrap();
    assert!(oracle >= 99.0, "oracle {oracle}");

    let mut t = trainer(
        &data,
        TrainConfig {
            eval_every: 200,
            ..config(600, 0)
        },
    );
    let out = t.train_sgal(small_model(&data, 17)).unwrap();
    let pred = classify_batch(
        &out.pretrained,
        data.test_seen.features().view(),
        &data.classes.seen,
    )
    .unwrap();
    let (_, top1) = per_class_top1(data.test_seen.labels(), &pred).unwrap();
    assert!(top1 >= oracle - 5.0, "seen top-1 {top1}, oracle {oracle}");
}

#[test]
fn outcome_save_writes_named_files() {
    let data = small_fixture(18);
    let out = trainer(&data, config(10, 10))
        .train_sgal(small_model(&data, 18))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = out.save(dir.path(), 6).unwrap();
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names[0],
        format!("checkpoint_best_iter{}.bin", out.best_iteration)
    );
    assert_eq!(names[1], "checkpoint_final_iter20.bin");
    assert_eq!(names[2], LOG_FILE);
    let (loaded, info) = crate::model::load_checkpoint::<f64>(&paths[1]).unwrap();
    assert_eq!(loaded, out.final_model);
    assert_eq!(info.class_count, 6);
}

#[test]
fn prepared_data_standardizes_with_training_statistics() {
    let data = small_fixture(19);
    let mean = data.train.features().mean_axis(Axis(0)).unwrap();
    assert!(mean.iter().all(|m| m.abs() < 1e-12));
    let std = data.train.features().std_axis(Axis(0), 0.0);
    assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-12));
    assert_eq!(data.train.len(), 4 * 60);
    assert_eq!(data.validation.len(), 6 * 20);
    assert_eq!(data.test_seen.len(), 4 * 60);
    assert_eq!(data.test_unseen.len(), 2 * 60);
}
