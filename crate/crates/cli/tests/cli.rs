use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn kdseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_then_run_all_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = kdseg(&["gen-data", "-c", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let test_dir = dir.path().join("data/target/test");
    assert_eq!(fs::read_dir(test_dir.join("images")).unwrap().count(), 3);

    let out = kdseg(&["run-all", "-c", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Stage II w/ aug"), "{table}");
    assert!(dir.path().join("metrics.json").is_file());

    let report = dir.path().join("eval.json");
    let ckpt = dir.path().join("checkpoints/stage2.ckpt");
    let out = kdseg(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&test_dir), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json.is_object());

    let out = kdseg(&["report", "--dir", s(dir.path())]);
    assert!(out.status.success());
    assert!(dir.path().join("report/dsc_bars.png").is_file());
}

#[test]
fn stepwise_commands_match_the_pipeline_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let base = ["-c", s(&cfg), "--out", s(dir.path())];
    for cmd in ["train-source", "precompute-labels", "train-stage1", "train-stage2"] {
        let mut args = vec![cmd];
        args.extend(base);
        let out = kdseg(&args);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["source.ckpt", "stage1.ckpt", "stage2.ckpt"] {
        assert!(dir.path().join("checkpoints").join(name).is_file(), "{name}");
    }
    assert!(dir.path().join("pseudo_labels.bin").is_file());
}

#[test]
fn report_on_an_empty_directory_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdseg(&["report", "--dir", s(dir.path())]);
    assert!(out.status.success());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = kdseg(&["run-all", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = kdseg(&["run-all", "-c", s(&smoke_config()), "--out", s(&run), "--set", "optimizer.stage1.epochs=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
    assert!(!run.exists());

    let out = kdseg(&["run-all", "-c", s(&smoke_config()), "--out", s(&run), "--set", "bogus.key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdseg(&["evaluate", "--checkpoint", s(&dir.path().join("none.ckpt")), "--data", s(dir.path())]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
