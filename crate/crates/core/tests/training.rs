use rtda_core::attack::{AttackSpec, Norm};
use rtda_core::config::{EpsilonSetting, RunConfig};
use rtda_core::data::{generate_synthetic, split_dataset, LabeledDataset, SyntheticSpec};
use rtda_core::eval::{adversarial_accuracy, clean_accuracy};
use rtda_core::harness::{bench_command, select_epsilon};
use rtda_core::model::{load_params, save_params};
use rtda_core::objective::{ObjectiveKind, ObjectiveSpec};
use rtda_core::train::train;
use rtda_core::{build_model, Model, ModelConfig, Network, SgdConfig};

fn benchmark_split() -> (LabeledDataset, LabeledDataset) {
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    split_dataset(&ds, 0.8, 0).unwrap()
}

/// Nearest class mean in pixel space, fitted on `train`.
fn nearest_centroid_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
    let d = train.images()[0].numel();
    let mut centroids = vec![vec![0.0; d]; train.num_classes];
    for (img, &y) in train.images().iter().zip(train.labels()) {
        for (c, v) in centroids[y].iter_mut().zip(img.data()) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(train.class_counts()) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = test
        .images()
        .iter()
        .zip(test.labels())
        .filter(|(img, &y)| {
            let dist = |c: &Vec<f64>| c.iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..centroids.len())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == y
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn synthetic_classes_are_separable_by_a_pixel_space_oracle() {
    let (train, test) = benchmark_split();
    assert_eq!((train.len(), test.len()), (2000, 500));
    let acc = nearest_centroid_accuracy(&train, &test);
    assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn standard_training_fits_the_default_benchmark() {
    let (train_ds, _) = benchmark_split();
    let (model, params) = build_model(&ModelConfig::default()).unwrap();
    let sgd = SgdConfig {
        epochs: 20,
        decay_every_epochs: 14,
        ..Default::default()
    };
    let out = train(&model, params, &sgd, &ObjectiveSpec::new(ObjectiveKind::Standard), &train_ds, 0).unwrap();
    let acc = clean_accuracy(&Network::new(&model, &out.params), &train_ds).unwrap();
    assert!(acc >= 0.95, "final train accuracy {acc}");
}

#[test]
fn warmup_scales_the_training_attack() {
    let sgd = SgdConfig {
        epsilon_warmup_epochs: 3,
        ..Default::default()
    };
    let scales: Vec<f64> = (0..6).map(|e| sgd.epsilon_scale(e)).collect();
    assert_eq!(scales, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    let none = SgdConfig {
        epsilon_warmup_epochs: 0,
        ..Default::default()
    };
    assert_eq!(none.epsilon_scale(0), 1.0);

    // with warm-up, the first epoch of AT differs from a run without it
    let ds = generate_synthetic(&SyntheticSpec {
        samples_per_class: 16,
        ..Default::default()
    })
    .unwrap();
    let (model, params) = build_model(&ModelConfig::default()).unwrap();
    let spec = ObjectiveSpec::new(ObjectiveKind::AT).with_attack(AttackSpec::new(Norm::L2, 0.5, 2));
    let one = |warmup| {
        let sgd = SgdConfig {
            epochs: 1,
            epsilon_warmup_epochs: warmup,
            ..Default::default()
        };
        train(&model, params.clone(), &sgd, &spec, &ds, 0).unwrap().log
    };
    assert_ne!(one(0)[0].total, one(2)[0].total);
    assert_eq!(one(2), one(2));
}

#[test]
fn epsilon_selection_finds_where_standard_accuracy_starts_to_drop() {
    let (model, params) = build_model(&ModelConfig::default()).unwrap();
    let ds = generate_synthetic(&SyntheticSpec {
        samples_per_class: 60,
        ..Default::default()
    })
    .unwrap();
    let (train_ds, test_ds) = split_dataset(&ds, 0.8, 0).unwrap();
    let sgd = SgdConfig {
        epochs: 6,
        ..Default::default()
    };
    let trained = train(&model, params, &sgd, &ObjectiveSpec::new(ObjectiveKind::Standard), &train_ds, 0).unwrap();
    let cfg = RunConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let choice = select_epsilon(&cfg, &model, &[&trained.params], &test_ds, &pool).unwrap();
    let net = Network::new(&model, &trained.params);
    let base = cfg.eval.attack.spec();
    let clean = clean_accuracy(&net, &test_ds).unwrap();
    assert_eq!(choice.sweep[0], (0.0, clean));
    assert!((choice.threshold - (clean - cfg.epsilon_selection.drop)).abs() < 1e-15);
    // oracle: walk the grid directly
    let expected = cfg
        .epsilon_selection
        .grid
        .iter()
        .copied()
        .find(|&e| adversarial_accuracy(&net, &test_ds, &AttackSpec { epsilon: e, ..base.clone() }).unwrap() <= clean - 0.05);
    assert_eq!(Some(choice.epsilon), expected);
    assert!(choice.crossed);
}

#[test]
fn saved_parameters_reload_bit_exactly() {
    let (model, params) = build_model(&ModelConfig {
        stage_widths: vec![4, 8],
        seed: 17,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.rtns");
    save_params(&path, &params, model.config(), Some("AT"), Some(0.5)).unwrap();
    let (back, sidecar) = load_params(&path).unwrap();
    assert_eq!(back, params);
    for ((_, a), (_, b)) in back.iter().zip(params.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(sidecar.method.as_deref(), Some("AT"));
    assert_eq!(sidecar.train_epsilon, Some(0.5));
    assert_eq!(&sidecar.config, model.config());
    Model::new(&sidecar.config).unwrap().check_params(&back).unwrap();
}

#[test]
fn bench_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_json(
        r#"{"dataset": {"synthetic": {"samples_per_class": 20}},
            "sgd": {"epochs": 1, "batch_size": 10},
            "train_attack": {"steps": 2},
            "epsilon_selection": {"grid": [0, 0.5, 1, 2]},
            "eval": {"eps_list": [0, 1], "attack": {"steps": 2}},
            "seeds": [0, 1], "threads": 2}"#,
    )
    .unwrap();
    assert_eq!(cfg.train_attack.epsilon, EpsilonSetting::Select);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        cfg.output_dir = dir.path().join(run);
        let outcome = bench_command(&cfg, dir.path()).unwrap();
        assert!(outcome.epsilon.is_some());
        assert!(outcome.reports.iter().all(|r| r.failures.is_empty()));
        let mut names: Vec<_> = std::fs::read_dir(&cfg.output_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "md"))
            .collect();
        names.sort();
        files.push(
            names
                .iter()
                .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(files[0].len(), 8);
    assert_eq!(files[0], files[1]);
}
