use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neupde_core::checkpoint::{Checkpoint, Model};
use neupde_core::dictionary::{DictionarySpec, FeatureMap, NormalizationBounds};
use neupde_core::field::{LinearPart, VectorField};
use neupde_core::io::read_trajectory;
use neupde_core::pde::read_fields;
use neupde_core::SolverConfig;
use serde_json::{json, Value};

fn neupde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neupde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn small_spiral(iterations: usize) -> Value {
    json!({
        "experiment": "ode",
        "name": "sp",
        "data": {"system": "spiral", "x0": [1.0, 0.0, 0.0], "t0": 0.0, "t_end": 1.0,
                 "stamps": 21, "fine_substeps": 20, "noise_sigma": 0.01, "seed": 3},
        "model": {"degree": 2, "include_time": true, "hidden": 4, "activation": "elu", "seed": 1},
        "train": {"learning_rate": 0.01, "window_length": 3, "batch_size": 4,
                  "iterations": iterations, "eval_every": 5}
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_deterministic_and_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", &small_spiral(1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = neupde(&["generate", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["sp_clean.csv", "sp_noisy.csv", "sp.meta.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let meta: Value = serde_json::from_slice(&std::fs::read(a.join("sp.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["data"]["seed"], 3);
    let c = neupde(&["generate", "--config", s(&cfg), "--seed", "8", "--out", s(&b)]);
    assert_eq!(code(&c), 0);
    assert_ne!(
        std::fs::read(a.join("sp_noisy.csv")).unwrap(),
        std::fs::read(b.join("sp_noisy.csv")).unwrap()
    );
}

#[test]
fn config_and_io_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_spiral(1);
    v["train"]["lr"] = json!(0.1);
    let bad = write_json(dir.path(), "bad.json", &v);
    assert_eq!(code(&neupde(&["generate", "--config", s(&bad)])), 1);
    let good = write_json(dir.path(), "good.json", &small_spiral(1));
    let o = neupde(&["train", "--config", s(&good), "--out", s(&dir.path().join("empty"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("generate"));
    assert_eq!(code(&neupde(&["train", "--config", "/nonexistent.json"])), 1);
    assert_eq!(code(&neupde(&["frobnicate"])), 1);
    assert_eq!(code(&neupde(&["--help"])), 0);
}

#[test]
fn train_then_forecast_reproduces_trainer_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = write_json(out, "c.json", &small_spiral(20));
    assert_eq!(code(&neupde(&["generate", "--config", s(&cfg), "--out", s(out)])), 0);
    let o = neupde(&["train", "--config", s(&cfg), "--out", s(out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    // 14 terms (t, x1..x3 up to degree 2), 4 hidden, 3 outputs.
    assert_eq!(summary["param_count"], 14 * 4 + 4 + 4 * 3 + 3);

    let losses = std::fs::read_to_string(out.join("sp_losses.csv")).unwrap();
    let mut lines = losses.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,minibatch_mse,full_mse,learning_rate,failed_windows"
    );
    assert_eq!(lines.count(), 20);

    let ckpt = out.join("sp.ckpt.json");
    let fc = out.join("fc.csv");
    let o = neupde(&[
        "forecast",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&out.join("sp_noisy.csv")),
        "--out",
        s(&fc),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&fc).unwrap(),
        std::fs::read(out.join("sp_forecast.csv")).unwrap()
    );

    // A second training run is bit-identical.
    let again = out.join("again");
    std::fs::create_dir(&again).unwrap();
    for f in ["sp_clean.csv", "sp_noisy.csv"] {
        std::fs::copy(out.join(f), again.join(f)).unwrap();
    }
    assert_eq!(code(&neupde(&["train", "--config", s(&cfg), "--out", s(&again)])), 0);
    for f in ["sp_losses.csv", "sp.ckpt.json", "sp_forecast.csv"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

fn eval_value(pred: &Path, truth: &Path, metric: &str) -> f64 {
    let o = neupde(&["eval", "--pred", s(pred), "--truth", s(truth), "--metric", metric]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    v["value"].as_f64().unwrap()
}

#[test]
fn eval_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.csv");
    let pred = dir.path().join("pred.csv");
    std::fs::write(&truth, "t,x1,x2\n0,0.6,0.8\n1,1,0\n").unwrap();
    std::fs::write(&pred, "t,x1,x2\n0,1.6,1.8\n1,2,1\n").unwrap();
    assert_eq!(eval_value(&truth, &truth, "mse"), 0.0);
    assert_eq!(eval_value(&truth, &truth, "rel_l2_terminal"), 0.0);
    assert_eq!(eval_value(&pred, &truth, "mse"), 1.0);
    assert!((eval_value(&pred, &truth, "rel_l2_terminal") - 2f64.sqrt()).abs() < 1e-15);

    let short = dir.path().join("short.csv");
    std::fs::write(&short, "t,x1,x2\n0,1,1\n").unwrap();
    assert_eq!(code(&neupde(&["eval", "--pred", s(&short), "--truth", s(&truth)])), 1);
    assert_eq!(
        code(&neupde(&[
            "eval",
            "--pred",
            s(&pred),
            "--truth",
            s(&truth),
            "--metric",
            "mae"
        ])),
        1
    );
}

#[test]
fn forecast_of_zero_field_is_constant_and_blow_up_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let features = FeatureMap::new(
        DictionarySpec::new(2, 1, false).unwrap(),
        NormalizationBounds::new(-1.0, 1.0).unwrap(),
        None,
    )
    .unwrap();
    let zero = VectorField::new(features.clone(), None, Some(LinearPart::zeros(2))).unwrap();
    let p = dir.path().join("zero.json");
    Checkpoint::new(Model::Ode(zero), SolverConfig::default(), 0, None)
        .save(&p)
        .unwrap();
    let fc = dir.path().join("fc.csv");
    let o = neupde(&[
        "forecast",
        "--checkpoint",
        s(&p),
        "--x0",
        "0.5,-2",
        "--times",
        "0:3:7",
        "--out",
        s(&fc),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_trajectory(&fc).unwrap();
    assert_eq!(t.len(), 7);
    assert!(t.states().iter().all(|x| x == &vec![0.5, -2.0]));

    let boom = VectorField::new(
        features,
        None,
        Some(LinearPart {
            dim: 2,
            matrix: vec![400.0, 0.0, 0.0, 400.0],
        }),
    )
    .unwrap();
    let p = dir.path().join("boom.json");
    Checkpoint::new(Model::Ode(boom), SolverConfig::default(), 0, None)
        .save(&p)
        .unwrap();
    let o = neupde(&[
        "forecast",
        "--checkpoint",
        s(&p),
        "--x0",
        "1,1",
        "--times",
        "0:100:101",
        "--out",
        s(&fc),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite state in interval"));
    assert_eq!(
        code(&neupde(&[
            "forecast",
            "--checkpoint",
            "/missing.json",
            "--x0",
            "1",
            "--times",
            "0:1:2",
            "--out",
            s(&fc)
        ])),
        1
    );
}

#[test]
fn shipped_gradcheck_passes_and_adjoint_matches_on_smooth_problem() {
    let dir = tempfile::tempdir().unwrap();
    let o = neupde(&[
        "gradcheck",
        "--config",
        s(&shipped("gradcheck_tiny.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["engine"], "bptt");
    assert!(r["worst_rel_err"].as_f64().unwrap() <= 1e-6, "{r}");
    assert!(dir.path().join("gradcheck_tiny_gradcheck.json").exists());

    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(shipped("gradcheck_tiny.json")).unwrap()).unwrap();
    v["loss"]["smooth_weight"] = json!(0.0);
    let cfg = write_json(dir.path(), "smooth.json", &v);
    let o = neupde(&[
        "gradcheck",
        "--config",
        s(&cfg),
        "--engine",
        "adjoint",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["engine"], "adjoint");
    assert!(r["worst_rel_err"].as_f64().unwrap() <= 1e-3, "{r}");
}

#[test]
fn lorenz_baseline_csv_holds_true_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let o = neupde(&[
        "baseline",
        "--config",
        s(&shipped("lorenz.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("lorenz_coefficients.csv")).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), "term,dx1/dt,dx2/dt,dx3/dt");
    let expect = |term: &str| -> [f64; 3] {
        match term {
            "x1" => [-10.0, 28.0, 0.0],
            "x2" => [10.0, -1.0, 0.0],
            "x3" => [0.0, 0.0, -8.0 / 3.0],
            "x1 x2" => [0.0, 0.0, 1.0],
            "x1 x3" => [0.0, -1.0, 0.0],
            _ => [0.0; 3],
        }
    };
    let mut n = 0;
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let e = expect(cols[0]);
        for k in 0..3 {
            let v: f64 = cols[k + 1].parse().unwrap();
            assert!((v - e[k]).abs() < 1e-2, "{row}");
            assert_eq!(v == 0.0, e[k] == 0.0, "{row}");
        }
        n += 1;
    }
    assert_eq!(n, 9);
}

#[test]
fn burgers_generate_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "b.json",
        &json!({"experiment": "burgers", "name": "bg",
                "data": {"n": 8, "stamps": 4, "train_series": 2, "dt": 1e-4, "store_every": 2}}),
    );
    let o = neupde(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let train = read_fields(&dir.path().join("bg_train.bin")).unwrap();
    let test = read_fields(&dir.path().join("bg_test.bin")).unwrap();
    assert_eq!(
        (train.len(), train[0].len(), train[0].grid.nx, train[0].grid.ny),
        (2, 4, 8, 8)
    );
    assert_eq!(test.len(), 1);

    let csv = dir.path().join("stamp.csv");
    let o = neupde(&[
        "export",
        "--data",
        s(&dir.path().join("bg_train.bin")),
        "--record",
        "1",
        "--stamp",
        "2",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,y,u");
    assert_eq!(text.lines().count(), 1 + 64);
    let o = neupde(&[
        "export",
        "--data",
        s(&dir.path().join("bg_train.bin")),
        "--stamp",
        "9",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&o), 1);
}
