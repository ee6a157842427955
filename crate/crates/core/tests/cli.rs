mod common;

use std::path::Path;
use std::process::{Command, Output};

use holalign::config::RunConfig;
use holalign::trainer::{RunLog, DIAG_HEADER, METRICS_HEADER};

fn holalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_holalign")).args(args).env("PATH", "/nonexistent").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    path.to_str().unwrap().to_string()
}

/// The tiny run with its teacher saved next to the config.
fn tiny_run_config(dir: &Path) -> RunConfig {
    let mut cfg = common::tiny_config();
    let teacher = dir.join("teacher.hste");
    common::tiny_teacher(&cfg).save(&teacher).unwrap();
    cfg.teacher.checkpoint = Some(teacher);
    cfg
}

#[test]
fn malformed_config_exits_two_with_an_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[train]\nsteps = many\n").unwrap();
    let o = holalign(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.lines().any(|l| l.starts_with("ERROR kind=ConfigError detail=")), "{err}");
}

#[test]
fn unknown_flags_and_missing_files_are_reported() {
    assert_eq!(holalign(&["train", "--bogus"]).status.code(), Some(2));
    let o = holalign(&["sample", "--ckpt", "/nonexistent/ckpt.hste", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ERROR kind=IOError"), "{}", stderr(&o));
}

#[test]
fn plot_without_the_component_exits_four() {
    let o = holalign(&["plot", "runs/a"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("plot component not installed"));
}

#[test]
fn train_sample_eval_diag_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    let o = holalign(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 1 + 1 + cfg.train.steps as usize);
    assert!(std::fs::read_to_string(out.join("diag.csv")).unwrap().starts_with(DIAG_HEADER));
    assert_eq!(std::fs::read_to_string(out.join("config.cfg")).unwrap(), cfg.to_text());
    assert_eq!(std::fs::read_to_string(out.join("run.lock")).unwrap().trim(), cfg.hash());

    let ckpt = out.join(holalign::trainer::checkpoint_name(cfg.train.steps));
    let ckpt = ckpt.to_str().unwrap();
    let samples = dir.path().join("samples");
    let o = holalign(&["sample", "--ckpt", ckpt, "--out", samples.to_str().unwrap(), "--nfes", "1", "--n", "5", "--sampler", "ode"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = holalign::checkpoint::Checkpoint::read(&samples.join("samples.hste")).unwrap();
    assert_eq!(c.get("samples", holalign::checkpoint::TensorKind::Param).unwrap().shape(), &[5, 8, 8, 1]);
    assert!(std::fs::read(samples.join("samples.pgm")).unwrap().starts_with(b"P5\n"));

    let bad = holalign(&["sample", "--ckpt", ckpt, "--out", samples.to_str().unwrap(), "--nfes", "0"]);
    assert_eq!(bad.status.code(), Some(2));

    let eval = dir.path().join("eval");
    let o = holalign(&["eval", "--ckpt", ckpt, "--out", eval.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("eval.json")).unwrap()).unwrap();
    for key in ["mmd", "energy_distance", "feat_cos", "feat_cos_projected", "attn_ce", "n_samples"] {
        assert!(report.get(key).is_some(), "eval.json lacks {key}");
    }
    assert!(report["mmd"].as_f64().unwrap() >= 0.0);

    // One diag row per probe timestep, for each requested loss.
    let diag = dir.path().join("diag");
    let o = holalign(&["diag", "--ckpt", ckpt, "--out", diag.to_str().unwrap(), "--t", "0.05,0.5", "--loss", "repa"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = RunLog::read(&diag).unwrap();
    assert_eq!(log.diag.len(), 2);
    assert!(log.diag.iter().all(|d| d.loss_kind == "repa" && (-1.0..=1.0).contains(&d.rho)));
    let o = holalign(&["diag", "--ckpt", ckpt, "--out", diag.to_str().unwrap(), "--loss", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_directory_is_locked_to_its_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config(dir.path());
    cfg.train.steps = 2;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    assert!(holalign(&["train", "--config", &config, "--out", out.to_str().unwrap()]).status.success());
    cfg.train.lr = 5e-4;
    let config = write_config(dir.path(), &cfg);
    let o = holalign(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ERROR kind=ConfigError"));
}

#[test]
fn teacher_train_writes_weights_and_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config();
    cfg.teacher.pretrain.steps = 5;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("teacher");
    let o = holalign(&["teacher-train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = holalign::teacher::Teacher::load(&out.join("teacher.hste")).unwrap();
    let info: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("teacher.json")).unwrap()).unwrap();
    assert_eq!(info["checksum"].as_str(), Some(t.checksum().as_str()));
    assert!((0.0..=1.0).contains(&info["holdout_accuracy"].as_f64().unwrap()));
}
