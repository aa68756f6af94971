//! End-to-end runs of the `keymorph` binary.

mod common;

use std::process::{Command, Output};

use common::{fixture, read_json, Fixture};

fn keymorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keymorph")).args(args).output().unwrap()
}

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

fn pair_args<'a>(f: &'a Fixture, moving: &str, fixed: &str, out: &'a str) -> Vec<String> {
    vec![
        "--weights".into(),
        s(&f.weights).into(),
        "--moving".into(),
        s(&f.subject_file(moving, "mod0.kmt")).into(),
        "--fixed".into(),
        s(&f.subject_file(fixed, "mod0.kmt")).into(),
        "--out".into(),
        out.into(),
    ]
}

fn run_ok(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = keymorph(&refs);
    assert!(out.status.success(), "{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn missing_weights_is_a_usage_error() {
    let f = fixture();
    let missing = f.path("nope/weights.json");
    let out = f.path("out");
    let mut args = pair_args(&f, "s0000", "s0001", s(&out));
    args[1] = s(&missing).into();
    let refs: Vec<&str> = std::iter::once("register").chain(args.iter().map(String::as_str)).collect();
    let o = keymorph(&refs);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
}

#[test]
fn negative_lambda_is_a_usage_error() {
    let f = fixture();
    let out = f.path("out");
    let mut args = vec!["register".to_string()];
    args.extend(pair_args(&f, "s0000", "s0001", s(&out)));
    args.extend(["--transform".into(), "tps".into(), "--lambda".into(), "-0.5".into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(keymorph(&refs).status.code(), Some(2));
    let mut sweep = vec!["sweep".to_string()];
    sweep.extend(pair_args(&f, "s0000", "s0001", s(&out)));
    sweep.extend(["--lambdas".into(), "1,-1".into()]);
    let refs: Vec<&str> = sweep.iter().map(String::as_str).collect();
    assert_eq!(keymorph(&refs).status.code(), Some(2));
}

#[test]
fn self_registration_has_unit_dice() {
    let f = fixture();
    let out = f.path("self");
    let id = &f.subjects[0].id;
    let labels = f.subject_file(id, "labels.kmt");
    let mut args = vec!["register".to_string()];
    args.extend(pair_args(&f, id, id, s(&out)));
    args.extend(["--labels".into(), s(&labels).into(), s(&labels).into()]);
    run_ok(args);
    for file in ["warped.kmt", "warped.png", "transform.json", "keypoints.json", "metrics.json"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["metrics"]["dice"]["mean"].as_f64().unwrap(), 1.0);
}

#[test]
fn tps_at_zero_lambda_interpolates() {
    let f = fixture();
    let out = f.path("tps");
    let mut args = vec!["register".to_string()];
    args.extend(pair_args(&f, "s0000", "s0001", s(&out)));
    args.extend(["--transform".into(), "tps".into(), "--lambda".into(), "0".into()]);
    run_ok(args);
    let m = read_json(&out.join("metrics.json"));
    assert!(m["control_point_residual"].as_f64().unwrap() < 1e-6);
    assert_eq!(m["lambda"].as_f64(), Some(0.0));
}

#[test]
fn single_lambda_sweep_matches_register() {
    let f = fixture();
    let (reg, sw) = (f.path("reg"), f.path("sweep"));
    let mut args = vec!["register".to_string()];
    args.extend(pair_args(&f, "s0000", "s0002", s(&reg)));
    args.extend(["--transform".into(), "tps".into(), "--lambda".into(), "0.1".into()]);
    run_ok(args);
    let mut args = vec!["sweep".to_string()];
    args.extend(pair_args(&f, "s0000", "s0002", s(&sw)));
    args.extend(["--lambdas".into(), "0.1".into()]);
    run_ok(args);
    for file in ["transform.json", "keypoints.json", "warped.kmt"] {
        let a = std::fs::read(reg.join(file)).unwrap();
        let b = std::fs::read(sw.join("lambda_000").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn log_sweep_writes_an_index() {
    let f = fixture();
    let out = f.path("log");
    let mut args = vec!["sweep".to_string()];
    args.extend(pair_args(&f, "s0001", "s0002", s(&out)));
    args.extend(["--lambdas".into(), "log:1e-4:10:20".into()]);
    run_ok(args);
    let index = read_json(&out.join("index.json"));
    let entries = index["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 20);
    let lambdas: Vec<f64> = entries.iter().map(|e| e["lambda"].as_f64().unwrap()).collect();
    assert!((lambdas[0] - 1e-4).abs() < 1e-12 && (lambdas[19] - 10.0).abs() < 1e-9);
    assert!(lambdas.windows(2).all(|w| w[0] < w[1]));
    for e in entries {
        assert!(out.join(e["dir"].as_str().unwrap()).join("transform.json").is_file());
    }
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    run_ok(vec!["synth".into(), "--out".into(), s(&root).into(), "--count".into(), "2".into(), "--shape".into(), "16,16".into()]);
    let ds = keymorph_cli::load_dataset(&root).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds[0].shape(), &[16, 16]);
}

#[test]
fn short_training_and_eval_write_outputs() {
    let f = fixture();
    let cfg = f.path("train.json");
    let config = serde_json::json!({
        "pretrain_steps": 2,
        "steps": 2,
        "num_subjects": 3,
        "detector": { "input_shape": [32, 32] },
        "augmentation": { "extent": 32 },
        "pretrain": { "augmentation": { "extent": 32 } }
    });
    std::fs::write(&cfg, config.to_string()).unwrap();
    let w = f.path("trained/w.json");
    run_ok(vec!["train".into(), "--config".into(), s(&cfg).into(), "--out".into(), s(&w).into()]);
    assert!(w.is_file());
    let trace = read_json(&f.path("trained/w.trace.json"));
    assert_eq!(trace.as_array().unwrap().len(), 4);

    let ecfg = f.path("eval.json");
    let e = serde_json::json!({ "shape": [32, 32], "num_subjects": 3, "num_pairs": 2, "angles": [0.0, 90.0], "repeat_transforms": 2 });
    std::fs::write(&ecfg, e.to_string()).unwrap();
    let report = f.path("report.json");
    run_ok(vec!["eval".into(), "--weights".into(), s(&w).into(), "--config".into(), s(&ecfg).into(), "--out".into(), s(&report).into()]);
    let r = read_json(&report);
    assert_eq!(r["curves"]["robustness"]["dice"].as_array().unwrap().len(), 2);
    assert!(r["config_hash"].as_str().unwrap().len() == 64);
}
