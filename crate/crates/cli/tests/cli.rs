use std::path::Path;
use std::process::{Command, Output};

fn abbnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abbnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("ABBNN_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUICK: &[&str] = &["--spec", "toy.spec", "--data", "synth", "--epochs", "1", "--train", "200", "--test", "50"];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    abbnn(dir, &args)
}

#[test]
fn audit_reports_reactnet18_total() {
    let dir = tempfile::tempdir().unwrap();
    let o = abbnn(dir.path(), &["audit", "--spec", "reactnet18.spec", "--hw", "224", "--variant", "bnfree", "--report-out", "r.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4779264"));
    let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["grand_total"], 4779264);

    let ab = abbnn(dir.path(), &["audit", "--spec", "bundled:reactnet_a", "--variant", "ab", "--format", "jsonl"]);
    let last: serde_json::Value = serde_json::from_str(stdout(&ab).lines().last().unwrap()).unwrap();
    assert_eq!(last["grand_total"], 0);
}

#[test]
fn missing_spec_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = abbnn(dir.path(), &["train", "--spec", "no/such.spec"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such.spec"));
}

#[test]
fn config_file_rules() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "spec = toy.spec\nepoks = 3\n").unwrap();
    let o = abbnn(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoks"));

    // flags win over the file
    std::fs::write(dir.path().join("ok.cfg"), "spec = toy.spec\nepochs = 0\ntrain = 100\ntest = 20\n").unwrap();
    assert_eq!(abbnn(dir.path(), &["train", "--config", "ok.cfg"]).status.code(), Some(2));
    let o = abbnn(dir.path(), &["train", "--config", "ok.cfg", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn training_is_repeatable_and_seed_env_applies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(train(d, &["--checkpoint", "a.abck", "--seed", "7"]).status.success());
    assert!(train(d, &["--checkpoint", "b.abck", "--seed", "7"]).status.success());
    let log = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert!(!log("a.metrics.jsonl").is_empty());
    assert_eq!(log("a.metrics.jsonl"), log("b.metrics.jsonl"));
    assert_eq!(log("a.abck"), log("b.abck"));

    // a rerun into the same files gives the same bytes
    assert!(train(d, &["--checkpoint", "a.abck", "--seed", "7"]).status.success());
    assert_eq!(log("a.metrics.jsonl"), log("b.metrics.jsonl"));

    let mut args = vec!["train"];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(&["--checkpoint", "c.abck"]);
    let o = Command::new(env!("CARGO_BIN_EXE_abbnn")).args(&args).current_dir(d).env("ABBNN_SEED", "7").output().unwrap();
    assert!(o.status.success());
    assert_eq!(log("c.abck"), log("a.abck"));
}

#[test]
fn rleaky_ablation_arm_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--activation", "rleaky:-3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bad = train(dir.path(), &["--activation", "leaky"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn pipeline_train_export_infer_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(train(d, &["--checkpoint", "m.abck", "--step1-checkpoint", "s1.abck"]).status.success());
    assert!(abbnn(d, &["export", "--ckpt", "m.abck", "--out", "m.abnn"]).status.success());
    assert!(abbnn(d, &["gendata", "--out", "data", "--train", "0", "--test", "5"]).status.success());

    let o = abbnn(d, &["infer", "--model", "m.abnn", "--input", "data/test-images.idx", "--strict", "--counters-out", "c.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "multiplications: 0"), "{out}");
    assert_eq!(out.lines().filter(|l| l.contains("top_k")).count(), 5);
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("c.json")).unwrap()).unwrap();
    assert_eq!(c["counters"]["multiplications"], 0);

    let default_mode = abbnn(d, &["infer", "--model", "m.abnn", "--input", "data/test-images.idx"]);
    assert!(default_mode.status.success());
    assert!(stdout(&default_mode).lines().any(|l| l == "non-boundary multiplications: 0"));

    let v = abbnn(d, &["verify", "--model", "m.abnn", "--ckpt", "m.abck", "--probes", "100", "--report-out", "v.json"]);
    assert!(v.status.success(), "{}{}", stdout(&v), stderr(&v));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("v.json")).unwrap()).unwrap();
    assert!(r["sign_agreement"].as_f64().unwrap() >= 0.999);

    // a step-1 state cannot be folded
    assert_eq!(abbnn(d, &["export", "--ckpt", "s1.abck", "--out", "x.abnn"]).status.code(), Some(6));
    // a checkpoint for another graph
    assert_eq!(abbnn(d, &["export", "--ckpt", "m.abck", "--spec", "toy_downsample"]).status.code(), Some(5));

    let mut bytes = std::fs::read(d.join("m.abnn")).unwrap();
    let k = bytes.len() - 12;
    bytes[k] ^= 0x10;
    std::fs::write(d.join("bad.abnn"), bytes).unwrap();
    let o = abbnn(d, &["verify", "--model", "bad.abnn", "--ckpt", "m.abck"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn step2_alone_needs_a_step1_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(train(d, &["--phase", "step2"]).status.code(), Some(2));
    assert!(train(d, &["--phase", "step1", "--checkpoint", "s1.abck"]).status.success());
    let o = train(d, &["--phase", "step2", "--init-checkpoint", "s1.abck", "--checkpoint", "s2.abck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(abbnn(d, &["export", "--ckpt", "s2.abck", "--out", "m.abnn"]).status.success());
}

#[test]
fn gendata_is_deterministic_and_handles_empty_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        assert!(abbnn(d, &["gendata", "--out", out, "--train", "20", "--test", "0", "--seed", "5"]).status.success());
    }
    for f in ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
    // the empty test split still makes a usable directory
    let o = abbnn(d, &["train", "--spec", "toy", "--data", "a", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unreadable_data_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = abbnn(dir.path(), &["train", "--spec", "toy", "--data", "missing_dir", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
