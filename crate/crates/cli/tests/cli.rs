use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnprobe"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path) {
    ok(dir, &["corpus", "generate", "--seed", "4", "--train", "12", "--valid", "4", "--gold", "6", "--out", "c.json"]);
}

#[test]
fn validate_reports_counts_and_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let msg = ok(dir.path(), &["corpus", "validate", "c.json"]);
    assert!(msg.starts_with("ok: 22 instances"), "{msg}");

    let mut doc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("c.json")).unwrap()).unwrap();
    doc["instances"][0]["report"] = serde_json::json!([]);
    std::fs::write(dir.path().join("bad.json"), doc.to_string()).unwrap();
    let out = run(dir.path(), &["corpus", "validate", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = run(dir.path(), &["corpus", "validate", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_and_eval_are_byte_identical_across_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outputs: Vec<Vec<Vec<u8>>> = dirs
        .iter()
        .map(|d| {
            let d = d.path();
            generate(d);
            ok(d, &["model", "train", "--corpus", "c.json", "--seed", "2", "--epochs", "1", "--out", "m.json"]);
            let eval = ["--corpus", "c.json", "--params", "m.json", "--split", "gold", "--seed", "3"];
            ok(d, &[&["eval", "run"][..], &eval, &["--out", "run.csv"]].concat());
            ok(d, &[&["eval", "delta", "--perturb", "swap-left-right"][..], &eval, &["--out", "delta.csv"]].concat());
            ok(d, &["perturb", "apply", "random-bboxes", "--seed", "9", "c.json", "--out", "p.json"]);
            ["m.json", "run.csv", "run.json", "delta.csv", "p.json"]
                .iter()
                .map(|f| std::fs::read(d.join(f)).unwrap())
                .collect()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    let header = String::from_utf8(outputs[0][1].clone()).unwrap();
    assert!(header.lines().next().unwrap().contains("auroc"), "{header}");
}

#[test]
fn different_seeds_give_different_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["corpus", "generate", "--seed", "1", "--train", "3", "--valid", "1", "--gold", "1", "--out", "a.json"]);
    ok(d, &["corpus", "generate", "--seed", "2", "--train", "3", "--valid", "1", "--gold", "1", "--out", "b.json"]);
    assert_ne!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
}

#[test]
fn unknown_perturbation_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let out = run(dir.path(), &["perturb", "apply", "shuffle-everything", "--seed", "1", "c.json", "--out", "p.json"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("p.json").exists());
}
