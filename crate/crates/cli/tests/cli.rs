//! Drives the `atlasprompt` binary end to end on a tiny phantom.

use std::path::Path;
use std::process::{Command, Output};

use atlasprompt::phantom::PhantomSpec;
use atlasprompt_cli::PipelineConfig;

fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.phantom.n_train = 2;
    c.phantom.n_test = 1;
    c.phantom.spec = PhantomSpec::with_grid(24, 2.0);
    c.phantom.spec.ga_range = [27, 31];
    c.grid.size = 24;
    c.grid.spacing = 2.0;
    c.network.encoder_pools = vec![false, true, true, false];
    c.train.optimizer.epochs = 1;
    c.train.slice_stride = 4;
    c
}

fn atlasprompt(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlasprompt"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    tiny_config().save(&p).unwrap();
    p
}

#[test]
fn stage_out_of_order_exits_3() {
    let work = tempfile::tempdir().unwrap();
    let o = atlasprompt(work.path(), &["infer"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("stage order"));
}

#[test]
fn unknown_config_field_exits_2() {
    let work = tempfile::tempdir().unwrap();
    let p = work.path().join("bad.json");
    std::fs::write(&p, r#"{ "seed": 1, "no_such_field": true }"#).unwrap();
    let o = atlasprompt(work.path(), &["--config", p.to_str().unwrap(), "phantom"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn unknown_structure_exits_2() {
    let work = tempfile::tempdir().unwrap();
    let o = atlasprompt(work.path(), &["--structures", "cortex,spleen", "phantom"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("spleen"));
}

#[test]
fn full_run_is_resumable_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let work = dir.path().join("run");
    let cfg = cfg.to_str().unwrap();

    let o = atlasprompt(&work, &["--config", cfg, "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.json", "config.json", "report/report.md", "evaluate/metrics.csv"] {
        assert!(work.join(f).exists(), "{f} missing");
    }

    // saved config.json is picked up without --config
    let o = atlasprompt(&work, &["run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("up to date").count(), 8, "{}", stdout(&o));

    let log = work.join("train/training_log.csv");
    let mut bytes = std::fs::read(&log).unwrap();
    bytes.extend_from_slice(b"tampered\n");
    std::fs::write(&log, bytes).unwrap();
    let o = atlasprompt(&work, &["infer"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("train"));

    // narrowing the structure set makes downstream stages stale until rerun
    let o = atlasprompt(&work, &["--structures", "csf", "fuse"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn seed_flag_changes_the_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&atlasprompt(&a, &["--config", cfg, "--seed", "1", "phantom"])), 0);
    assert_eq!(code(&atlasprompt(&b, &["--config", cfg, "--seed", "2", "phantom"])), 0);
    let manifest = |w: &Path| std::fs::read_to_string(w.join("dataset/manifest.json")).unwrap();
    assert_ne!(manifest(&a), manifest(&b));
    let saved = PipelineConfig::load(&a.join("config.json")).unwrap();
    assert_eq!(saved.seed, 1);
}
