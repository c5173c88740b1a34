use std::path::Path;
use std::process::{Command, Output};

fn frtpad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frtpad")).args(args).current_dir(cwd).output().expect("spawn frtpad")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_MODEL: &str = r#"{
    "detector": { "input": [3, 8, 8], "channels": [4, 4], "d_p": 8 },
    "adapter": {
        "levels": [ {"c": 2, "h": 4, "w": 4}, {"c": 4, "h": 4, "w": 4}, {"c": 4, "h": 3, "w": 3} ],
        "proj_channels": 2, "proj_pool": 2, "d": 6, "d_hidden": 4, "d_out": 4
    }
}"#;

fn synth_spec(dir: &Path) {
    let spec = r#"{
        "A": { "per_class": 12, "raw_input": [3, 8, 8], "levels": [ {"c": 2, "h": 4, "w": 4}, {"c": 4, "h": 4, "w": 4}, {"c": 4, "h": 3, "w": 3} ] },
        "B": { "per_class": 12, "raw_input": [3, 8, 8], "levels": [ {"c": 2, "h": 4, "w": 4}, {"c": 4, "h": 4, "w": 4}, {"c": 4, "h": 3, "w": 3} ], "source_tag": "face-b" },
        "C": { "per_class": 12, "raw_input": [3, 8, 8], "levels": [ {"c": 2, "h": 4, "w": 4}, {"c": 4, "h": 4, "w": 4}, {"c": 4, "h": 3, "w": 3} ] }
    }"#;
    std::fs::write(dir.join("synth.json"), spec).unwrap();
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = frtpad(&["gradcheck", "--no-such-flag"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = frtpad(&["gradcheck", "--seeds", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 10);
    assert!(!out.contains("FAIL"));
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("job.json"), r#"{ "registry": {}, "train_ids": [], "train": { "lr": "fast" } }"#).unwrap();
    let o = frtpad(&["train", "--config", "job.json", "--out", "run"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[json]:"), "{err}");
    assert!(err.contains("train.lr"), "{err}");
}

#[test]
fn corrupted_container_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_spec(dir.path());
    assert!(frtpad(&["gen-synth", "--spec", "synth.json", "--out", "data"], dir.path()).status.success());
    let path = dir.path().join("data/A.fstk");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let job = format!(r#"{{ "registry": "data/registry.json", "train_ids": ["A"], "train": {{ "epochs": 1, "model": {TINY_MODEL} }} }}"#);
    std::fs::write(dir.path().join("job.json"), job).unwrap();
    let o = frtpad(&["train", "--config", "job.json", "--out", "run"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[container]: container parse error at byte"), "{}", stderr(&o));
}

#[test]
fn synth_train_eval_protocol_roc_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_spec(d);
    let o = frtpad(&["gen-synth", "--spec", "synth.json", "--out", "data", "--seed", "5"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for id in ["A", "B", "C"] {
        assert!(d.join(format!("data/{id}.fstk")).exists());
        assert!(d.join(format!("data/{id}.json")).exists());
    }
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("data/B.json")).unwrap()).unwrap();
    assert_eq!(b["source_tag"], "face-b");
    assert_eq!(b["samples"], 24);

    let job = format!(
        r#"{{ "registry": "data/registry.json", "train_ids": ["A"], "val_ids": ["B"], "train": {{ "epochs": 2, "batch_size": 8, "model": {TINY_MODEL} }} }}"#
    );
    std::fs::write(d.join("job.json"), job).unwrap();
    let o = frtpad(&["train", "--config", "job.json", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap().lines().count(), 2);

    let o = frtpad(&["eval", "--model", "run/model.pset", "--data", "data/C.fstk", "--report", "report.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["n"], 24);
    for key in ["hter", "auc", "bpcer_at_apcer_1pct", "eer_threshold"] {
        assert!(r[key].is_number(), "{key}");
    }

    let spec = format!(
        r#"{{ "registry": "data/registry.json", "mode": {{ "protocol_ii": {{ "train_ids": ["A"], "test_ids": ["C"] }} }},
             "train": {{ "epochs": 1, "batch_size": 8, "model": {TINY_MODEL} }} }}"#
    );
    std::fs::write(d.join("protocol.json"), spec).unwrap();
    let o = frtpad(&["protocol", "--spec", "protocol.json", "--out", "results"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("results/results.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);
    let csv = std::fs::read_to_string(d.join("results/results.csv")).unwrap();
    assert!(csv.starts_with("Method,Train,Test,HTER(%)↓,AUC(%)↑,BPCER@APCER=1%(%)↓"), "{csv}");
    assert_eq!(csv.lines().count(), 5);

    let scores = std::fs::read_dir(d.join("results/scores")).unwrap().next().unwrap().unwrap().path();
    let o = frtpad(&["roc", "--scores", scores.to_str().unwrap(), "--out", "roc.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let roc = std::fs::read_to_string(d.join("roc.csv")).unwrap();
    assert_eq!(roc.lines().next(), Some("threshold,apcer,one_minus_bpcer"));
    assert!(roc.lines().nth(1).unwrap().ends_with(",0,0"), "{roc}");
}
