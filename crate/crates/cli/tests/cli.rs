use std::path::Path;
use std::process::{Command, Output};

fn alignmol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignmol"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const METHANE: &str = "5\nid=methane\nC 0.000000 0.000000 0.000000\nH 0.629312 0.629312 0.629312\nH 0.629312 -0.629312 -0.629312\nH -0.629312 0.629312 -0.629312\nH -0.629312 -0.629312 0.629312\n";

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&alignmol(&["--help"])), 0);
    assert_eq!(code(&alignmol(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&alignmol(&[])), 1);
    assert_eq!(code(&alignmol(&["frobnicate"])), 1);
    assert_eq!(code(&alignmol(&["eval"])), 1);
    assert_eq!(code(&alignmol(&["train-ae", "--out", "x.ckpt"])), 1);
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nno_such_key = 3\n").unwrap();
    let out = dir.path().join("ae.ckpt");
    let o = alignmol(&["train-ae", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_reports_key_value_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.txt");
    std::fs::write(&p, format!("{METHANE}\n{METHANE}")).unwrap();
    let o = alignmol(&["eval", "--samples", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("molecules=2\n"), "{text}");
    assert!(text.contains("molecule_stability=1.000000\n"), "{text}");
    assert!(text.contains("validity_uniqueness=0.500000\n"), "{text}");
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&alignmol(&["eval", "--samples", empty.to_str().unwrap()])), 2);
    let missing = dir.path().join("missing.txt");
    assert_eq!(code(&alignmol(&["eval", "--samples", missing.to_str().unwrap()])), 2);
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "1\n\nQq 0 0 0\n").unwrap();
    let o = alignmol(&["eval", "--samples", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn align_pca_writes_the_same_format() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    std::fs::write(&input, METHANE).unwrap();
    let out = dir.path().join("out.txt");
    let o = alignmol(&["align-pca", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(Path::new(&out)).unwrap();
    assert!(text.starts_with("5\nid=methane\nC "), "{text}");
}
