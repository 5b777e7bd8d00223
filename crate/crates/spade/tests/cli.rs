use std::path::Path;
use std::process::{Command, Output};

fn spade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spade"))
        .args(args)
        .output()
        .expect("spawn spade")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = spade(&["cluster", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_bank_reports_the_path() {
    let out = spade(&["cluster", "--bank", "/no/such/bank", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    let json = stderr_json(&out);
    assert_eq!(json["error"], "IoError");
    assert!(json["path"].as_str().unwrap().contains("/no/such/bank"));
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[cluster]\nk3 = 4\n").unwrap();
    let out = spade(&["--config", cfg.to_str().unwrap(), "pipeline"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "BadConfig");
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let out = spade(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["synth", "--out", &p("raw"), "--spots-per-cluster", "40", "--seed", "3"]);
    ok(&["preprocess", "--bank", &p("raw"), "--out", &p("bank")]);
    ok(&["cluster", "--bank", &p("bank"), "--out", &p("cluster"), "--k1", "3", "--k2", "4", "--wcss-sweep", "1,2,3"]);
    let wcss: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("cluster/wcss.json")).unwrap()).unwrap();
    assert_eq!(wcss["organ0"][0][1], 1.0);
    ok(&[
        "--jobs", "2", "train-experts", "--cluster-model", &p("cluster"), "--bank", &p("bank"), "--out-dir", &p("experts"),
        "--hidden", "16", "--dim", "8", "--epochs", "2", "--lr", "1e-3", "--holdout", "0.2",
    ]);
    ok(&["embed", "--experts-dir", &p("experts"), "--bank", &p("bank"), "--out", &p("emb"), "--scheme", "hard"]);
    ok(&[
        "train-head", "--task", "classify", "--bags", &p("emb"), "--labels", &p("raw/labels_classify.json"),
        "--out", &p("head"), "--hidden", "8", "--epochs", "2",
    ]);
    let out = ok(&["eval", "--preds", &p("head/preds.json"), "--labels", &p("raw/labels_classify.json"), "--task", "classify"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("macro_f1"));
    let out = ok(&["heatmap", "--bag", &p("emb"), "--id", "organ0-slide000", "--model", &p("head"), "--out", &p("heat/a.csv")]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("a.pgm"));
    assert!(Path::new(&p("heat/a.pgm")).exists());

    let out = spade(&["heatmap", "--bag", &p("emb"), "--model", &p("head"), "--out", &p("heat/b.csv")]);
    assert_eq!(out.status.code(), Some(2));
    let out = spade(&["eval", "--preds", &p("head/preds.json"), "--labels", &p("raw/labels_survival.json"), "--task", "classify"]);
    assert_eq!(out.status.code(), Some(1));
}
