use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rem"))
        .args(args)
        .env_remove("REM_DATA_DIR")
        .output()
        .expect("run rem")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn synth(dir: &Path, n: &str, seed: &str) -> PathBuf {
    let out = dir.join(format!("synth-{seed}"));
    let o = rem(&[
        "synth", "--dim", "5", "--latent-dim", "2", "--n", n, "--test-n", "10",
        "--noise-var", "0.3", "--seed", seed, "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn train(extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(extra);
    rem(&args)
}

#[test]
fn bad_invocations_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "20", "1");
    let ds = format!("synth:{}", data.display());
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();
    assert_eq!(train(&["--method", "em", "--dataset", &ds, "--out", out]).status.code(), Some(2));
    assert_eq!(train(&["--k", "0", "--dataset", &ds, "--out", out]).status.code(), Some(2));
    assert_eq!(train(&["--dataset", "cifar", "--out", out]).status.code(), Some(2));
    assert_eq!(train(&["--method", "rem1", "--k", "1", "--dataset", &ds, "--out", out]).status.code(), Some(2));
    let o = rem(&["synth", "--dim", "3", "--latent-dim", "1", "--n", "5", "--noise-var", "0", "--seed", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(rem(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_data_and_corrupt_checkpoint_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = format!("synth:{}", tmp.path().join("nope").display());
    let o = train(&["--dataset", &missing, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"REMCKPT\0garbage").unwrap();
    assert_eq!(rem(&["eval", "--checkpoint", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn zero_epochs_writes_manifest_and_initial_checkpoint_then_eval_works() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "30", "2");
    let ds = format!("synth:{}", data.display());
    let runs = tmp.path().join("runs");
    let o = train(&[
        "--method", "iwae", "--dataset", &ds, "--epochs", "0", "--k", "5", "--latent-dim", "2",
        "--out", runs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = PathBuf::from(stdout(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config"]["epochs"], "0");
    assert!(run_dir.join("final.ckpt").exists());
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().last().unwrap().starts_with("epoch,"));

    let ckpt = run_dir.join("final.ckpt");
    let o = rem(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--eval-k", "20", "--data-dir", "/nonexistent"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("eval-test-k20-seed2019.json")).unwrap()).unwrap();
    assert!(report["nll_mean"].as_f64().unwrap().is_finite());
    assert_eq!(report["K"], 20);
    let points = fs::read_to_string(run_dir.join("eval-test-k20-seed2019.nll.txt")).unwrap();
    assert_eq!(points.lines().count(), 10);
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "15", "4");
    let b = synth(&tmp.path().join("b"), "15", "4");
    for f in ["train.txt", "test.txt", "model.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_config_file_and_resume_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "40", "5");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, format!("# small run\nmethod = rem2\nk = 3\ndataset = synth:{}\nlatent-dim = 2\nepochs = 1\n", data.display())).unwrap();
    let runs = tmp.path().join("runs");
    let o = train(&["--config", cfg.to_str().unwrap(), "--k", "4", "--out", runs.to_str().unwrap(), "--eval-k", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = PathBuf::from(stdout(&o));
    let text = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(text.lines().any(|l| l == "k=4"), "{text}");
    assert!(text.contains("rem2"));

    let ckpt = run_dir.join("final.ckpt");
    let o = train(&["--resume", ckpt.to_str().unwrap(), "--epochs", "2", "--out", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = PathBuf::from(stdout(&o));
    let metrics = fs::read_to_string(resumed.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("2,"));

    let o = train(&["--resume", ckpt.to_str().unwrap(), "--k", "9", "--out", runs.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
