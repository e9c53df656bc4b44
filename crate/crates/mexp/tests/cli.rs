//! Exit-code contract and basic plumbing of the `mexp` binary.

use std::path::Path;
use std::process::Command;

fn mexp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mexp"))
}

#[test]
fn usage_errors_exit_1() {
    for args in [
        vec!["definitely-not-a-subcommand"],
        vec!["train", "--out", "/tmp/should-not-exist"],
        vec!["patch", "--checkpoint", "/dev/null", "--pairs", "0", "--out-dir", "/tmp/x"],
        vec!["gen", "--count", "1", "--out", "/dev/null", "--threads", "0"],
    ] {
        let out = mexp().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "args {args:?}");
    }
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"a\":1}\n").unwrap();
    let missing = dir.path().join("missing.mexp1");
    let out = mexp()
        .args(["eval", "--checkpoint"])
        .arg(&missing)
        .arg("--dataset")
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_is_reproducible_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let st = mexp()
            .args(["gen", "--operands", "reciprocal", "--count", "500", "--seed", "11", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let rows = mexp::dataset::read_dataset(&a).unwrap();
    assert_eq!(rows.len(), 500);
    mexp::dataset::validate_instances(&rows).unwrap();
    assert!(Path::new(&format!("{}.meta.json", a.display())).exists() || mexp::dataset::meta_path(&a).exists());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "[sampler]\ncount = 40\nseed = 3\noperands = uniform\n").unwrap();
    let from_cfg = dir.path().join("cfg.jsonl");
    let st = mexp()
        .arg("--config")
        .arg(&cfg)
        .args(["gen", "--out"])
        .arg(&from_cfg)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(mexp::dataset::read_dataset(&from_cfg).unwrap().len(), 40);

    let overridden = dir.path().join("override.jsonl");
    let st = mexp()
        .arg("--config")
        .arg(&cfg)
        .args(["gen", "--count", "7", "--out"])
        .arg(&overridden)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(mexp::dataset::read_dataset(&overridden).unwrap().len(), 7);

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "not a key value line\n").unwrap();
    let out = mexp().arg("--config").arg(&bad).args(["gen", "--out", "/dev/null"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stats_reports_chi_square_for_reciprocal() {
    let out = mexp()
        .args(["stats", "--operands", "reciprocal", "--count", "20000", "--m", "100000", "--bins", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let p: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("chi_square_p = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(p > 0.001, "stats chi-square p {p} suspiciously low");
}
