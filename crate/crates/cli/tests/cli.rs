use std::path::Path;
use std::process::{Command, Output};

fn bgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgm")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const SMALL: &[&str] = &[
    "--override",
    "n=3000",
    "--override",
    "eval.n_heldout=500",
    "--override",
    "eval.n_perm=50",
    "--override",
    "flow.hidden=[8]",
    "--override",
    "train.max_epochs=3",
    "--override",
    "train.batch_size=512",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (a, b) = (out("a"), out("b"));
    for d in [&a, &b] {
        let o = bgm(&with(&["generate", "--out", d, "--seed", "1"], SMALL));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &str| std::fs::read(Path::new(d).join("data.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let header = String::from_utf8(read(&a)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "z,x,v0,v1,u0_hidden,u1_hidden");
    assert!(Path::new(&a).join("data.json").exists());
    assert!(Path::new(&a).join("config.json").exists());
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = bgm(&["generate", "--out", d, "--override", "scm=circle"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ellipse"));
    assert_eq!(code(&bgm(&["generate"])), 2, "missing --out");
    assert_eq!(code(&bgm(&["generate", "--out", d, "--override", "nope=1"])), 2);
    assert_eq!(code(&bgm(&["train", "--out", d, "--config", "/nonexistent.json"])), 2);
    assert_eq!(code(&bgm(&["frobnicate"])), 2);
    assert_eq!(code(&bgm(&["diagnose", "--out", d])), 2, "no model yet");
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = bgm(&with(&["train", "--out", d, "--override", "scm=monotone", "--override", "structure=markovian", "--override", "train.lr=1e300"], SMALL));
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("checkpoint.json").exists());
}

#[test]
fn train_counterfactual_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let base = with(&["--out", d, "--override", "scm=monotone", "--override", "structure=markovian"], SMALL);
    let o = bgm(&with(&["train"], &base));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["epochs"], 3);
    for f in ["model.json", "bgm.json", "loss.csv", "checkpoint.json", "config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let query = dir.path().join("q.json");
    std::fs::write(
        &query,
        r#"{"mode": "point", "evidence_x": [0.5], "evidence_v": [1.0], "intervention_x": [0.5]}"#,
    )
    .unwrap();
    let q = format!("query={}", serde_json::to_string(query.to_str().unwrap()).unwrap());
    let o = bgm(&with(&["counterfactual", "--override", &q], &base));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("counterfactual.csv")).unwrap();
    let last: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|t| t.parse().unwrap()).collect();
    assert!((last[1] - 1.0).abs() < 1e-6, "same treatment returns the evidence: {csv}");

    let o = bgm(&with(&["diagnose"], &base));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn corrupted_model_fails_diagnosis_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let base = with(&["--out", d, "--override", "scm=monotone", "--override", "structure=markovian"], SMALL);
    assert_eq!(code(&bgm(&with(&["train"], &base))), 0);

    // append a decreasing fixed warp to the mechanism
    let path = dir.path().join("model.json");
    let mut model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let b = 3.0;
    let knots: Vec<f64> = (0..=4).map(|k| -b + 1.5 * k as f64).collect();
    let warp = serde_json::json!({"type": "fixed_spline", "params": {
        "bound": b, "knot_x": knots, "knot_y": knots, "derivs": [1.0, 1.0, -5.0, 1.0, 1.0]
    }});
    model["network"]["bgm"]["layers"].as_array_mut().unwrap().push(warp);
    std::fs::write(&path, model.to_string()).unwrap();

    let o = bgm(&with(&["diagnose"], &base));
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("diagnostics.json").exists());
}

#[test]
fn eval_abr_prints_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = bgm(&with(&["eval-abr", "--out", d, "--override", "scm=abr-markovian", "--override", "structure=markovian"], SMALL));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(m["normalized_mse"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["schemes"][1]["scheme"], "replay");
    assert!(dir.path().join("metrics.json").exists());
}
