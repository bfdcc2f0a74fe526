use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rtda_core::data::{generate_synthetic, load_dataset, SyntheticSpec};
use rtda_core::model::load_params;
use rtda_core::Model;

const SMALL: &str = r#"{
  "dataset": {"synthetic": {"samples_per_class": 24}},
  "sgd": {"epochs": 1, "batch_size": 16},
  "train_attack": {"epsilon": 0.5, "steps": 2},
  "eval": {"eps_list": [0, 0.5], "attack": {"steps": 3}},
  "seeds": [0, 1],
  "threads": 1
}"#;

fn rtda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtda"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn unknown_keys_exit_with_code_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"sgd": {"epochs": 1, "learnig_rate": 0.1}}"#);
    let out = rtda(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("learnig_rate"), "{}", stderr(&out));

    let cfg = write_config(tmp.path(), "neg.json", r#"{"sgd": {"learning_rate": -1}}"#);
    let out = rtda(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sgd.learning_rate"), "{}", stderr(&out));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = rtda(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergent_training_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "diverge.json",
        r#"{"dataset": {"synthetic": {"samples_per_class": 16}},
            "sgd": {"learning_rate": 1e300, "epochs": 3, "batch_size": 8},
            "objectives": [{"kind": "standard"}], "seeds": [4]}"#,
    );
    let out = rtda(&["train", "--config", cfg.to_str().unwrap(), "--output", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("Standard") && err.contains("seed 4") && err.contains("epoch"), "{err}");
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "zero.json",
        r#"{"dataset": {"synthetic": {"samples_per_class": 8}}, "sgd": {"epochs": 0},
            "objectives": [{"kind": "standard"}], "seeds": [3]}"#,
    );
    let out_dir = tmp.path().join("out");
    let out = rtda(&["train", "--config", cfg.to_str().unwrap(), "--output", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (params, sidecar) = load_params(&out_dir.join("models/Standard_seed3.rtns")).unwrap();
    let model = Model::new(&sidecar.config).unwrap();
    assert_eq!(params, model.init_params(3));
    let log = fs::read_to_string(out_dir.join("logs/Standard_seed3.csv")).unwrap();
    assert_eq!(log.trim(), "epoch,batch,total,ce_term,consistency_term");
}

#[test]
fn training_logs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", SMALL);
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let out = rtda(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            dir.to_str().unwrap(),
            "--seeds",
            "2",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let files = read_dir_sorted(&dir.join("logs"));
        assert_eq!(files.len(), 7);
        logs.push(files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn eval_is_deterministic_and_starts_at_clean_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "eval.json",
        &SMALL.replace(r#""seeds": [0, 1],"#, r#""seeds": [0, 1], "objectives": [{"kind": "standard"}, {"kind": "at"}],"#),
    );
    let models = tmp.path().join("trained");
    let out = rtda(&["train", "--config", cfg.to_str().unwrap(), "--output", models.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let params: Vec<String> = read_dir_sorted(&models.join("models"))
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "rtns"))
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    assert_eq!(params.len(), 4);

    let mut outputs = Vec::new();
    for run in ["e1", "e2"] {
        let dir = tmp.path().join(run);
        let mut args = vec!["eval", "--config", cfg.to_str().unwrap(), "--output", dir.to_str().unwrap(), "--params"];
        args.extend(params.iter().map(String::as_str));
        let out = rtda(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let files: Vec<(String, Vec<u8>)> = ["sweep.csv", "brier.csv", "aggregate.csv", "contrast_hist.csv", "accuracy.csv"]
            .iter()
            .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);

    let read = |name: &str| -> Vec<csv::StringRecord> {
        csv::Reader::from_path(tmp.path().join("e1").join(name))
            .unwrap()
            .records()
            .map(Result::unwrap)
            .collect()
    };
    let clean = read("accuracy.csv");
    let sweep = read("sweep.csv");
    assert_eq!(clean.len(), 4);
    for row in &clean {
        let (method, seed, acc) = (&row[0], &row[1], &row[2]);
        let first = sweep
            .iter()
            .find(|r| &r[0] == method && &r[1] == seed)
            .expect("sweep row per cell");
        assert_eq!(first[2].parse::<f64>().unwrap(), 0.0);
        assert_eq!(&first[3], acc, "{method} seed {seed}");
    }
}

#[test]
fn eval_rejects_parameters_for_another_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "zero.json",
        r#"{"dataset": {"synthetic": {"samples_per_class": 8}}, "sgd": {"epochs": 0},
            "objectives": [{"kind": "standard"}], "seeds": [0]}"#,
    );
    let dir = tmp.path().join("m");
    assert_eq!(code(&rtda(&["train", "--config", cfg.to_str().unwrap(), "--output", dir.to_str().unwrap()])), 0);
    let wide = write_config(
        tmp.path(),
        "wide.json",
        r#"{"dataset": {"synthetic": {"samples_per_class": 8}}, "model": {"stage_widths": [4, 4]}}"#,
    );
    let model = dir.join("models/Standard_seed0.rtns");
    let out = rtda(&["eval", "--config", wide.to_str().unwrap(), "--params", model.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn untrained_models_score_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "chance.json",
        r#"{"dataset": {"synthetic": {"samples_per_class": 100}}, "sgd": {"epochs": 0},
            "objectives": [{"kind": "standard"}], "eval": {"eps_list": [0]}, "seeds": [0, 1, 2, 3, 4]}"#,
    );
    let dir = tmp.path().join("b");
    let out = rtda(&["bench", "--config", cfg.to_str().unwrap(), "--output", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(dir.join("aggregate.csv")).unwrap();
    let row = rdr
        .records()
        .map(Result::unwrap)
        .find(|r| &r[1] == "clean_accuracy")
        .unwrap();
    let mean: f64 = row[3].parse().unwrap();
    assert!((mean - 0.5).abs() <= 0.1, "mean clean accuracy {mean}");
}

#[test]
fn bench_aggregate_ignores_objective_order() {
    let tmp = tempfile::tempdir().unwrap();
    let base = r#"{"dataset": {"synthetic": {"samples_per_class": 16}}, "sgd": {"epochs": 1, "batch_size": 16},
        "train_attack": {"epsilon": 0.5, "steps": 2}, "eval": {"eps_list": [0, 0.5], "attack": {"steps": 2}},
        "seeds": [0], "objectives": OBJ}"#;
    let forward = base.replace("OBJ", r#"[{"kind": "standard"}, {"kind": "at"}, {"kind": "augmix"}]"#);
    let reverse = base.replace("OBJ", r#"[{"kind": "augmix"}, {"kind": "at"}, {"kind": "standard"}]"#);
    let mut sorted = Vec::new();
    for (name, text) in [("f", forward), ("r", reverse)] {
        let cfg = write_config(tmp.path(), &format!("{name}.json"), &text);
        let dir = tmp.path().join(name);
        let out = rtda(&["bench", "--config", cfg.to_str().unwrap(), "--output", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = fs::read_to_string(dir.join("aggregate.csv")).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines.sort();
        sorted.push(lines);
    }
    assert_eq!(sorted[0], sorted[1]);
}

#[test]
fn single_objective_bench_matches_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "std.json",
        r#"{"dataset": {"synthetic": {"samples_per_class": 16}}, "sgd": {"epochs": 1, "batch_size": 16},
            "objectives": [{"kind": "standard"}], "eval": {"eps_list": [0, 0.5], "attack": {"steps": 2}}, "seeds": [0]}"#,
    );
    let bench = tmp.path().join("bench");
    assert_eq!(code(&rtda(&["bench", "--config", cfg.to_str().unwrap(), "--output", bench.to_str().unwrap()])), 0);
    let trained = tmp.path().join("train");
    assert_eq!(code(&rtda(&["train", "--config", cfg.to_str().unwrap(), "--output", trained.to_str().unwrap()])), 0);
    let evald = tmp.path().join("eval");
    let model = trained.join("models/Standard_seed0.rtns");
    let out = rtda(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        evald.to_str().unwrap(),
        "--params",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["sweep.csv", "brier.csv", "aggregate.csv", "accuracy.csv"] {
        assert_eq!(fs::read(bench.join(f)).unwrap(), fs::read(evald.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn make_data_round_trips_through_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "data.json", r#"{"dataset": {"synthetic": {"samples_per_class": 10, "seed": 5}}}"#);
    let dir = tmp.path().join("export");
    let out = rtda(&["make-data", "--config", cfg.to_str().unwrap(), "--output", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let data_dir = dir.join("data");
    let loaded = load_dataset(&data_dir, &data_dir.join("manifest.tsv"), 2).unwrap();
    let original = generate_synthetic(&SyntheticSpec {
        samples_per_class: 10,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(loaded.labels(), original.labels());
    for (a, b) in loaded.images().iter().zip(original.images()) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert_eq!(x, (y * 255.0).round() / 255.0);
        }
    }

    // the exported directory is itself a valid dataset source
    let dir_cfg = write_config(
        &data_dir,
        "dir.json",
        r#"{"dataset": {"directory": {"image_dir": ".", "manifest": "manifest.tsv", "num_classes": 2}},
            "sgd": {"epochs": 0}, "objectives": [{"kind": "standard"}], "eval": {"eps_list": [0]}, "seeds": [0]}"#,
    );
    let out = rtda(&["bench", "--config", dir_cfg.to_str().unwrap(), "--output", tmp.path().join("b").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}
