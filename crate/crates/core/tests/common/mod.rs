#![allow(dead_code)]

use holalign::config::RunConfig;
use holalign::ndgrad::Rng;
use holalign::student::StudentConfig;
use holalign::teacher::{Teacher, TeacherConfig};

/// A two-block student on 8×8 images that trains in milliseconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.student = StudentConfig { depth: 2, width: 16, heads: 2, patch: 4, image_size: 8, classes: 3, time_dim: 8, ..StudentConfig::desk() };
    cfg.teacher.cfg = TeacherConfig { depth: 3, width: 12, heads: 2, patch: 4, image_size: 8, classes: 3, mlp_ratio: 2 };
    cfg.align.feature_depth = 1;
    cfg.align.pairs = vec![(0, 1), (1, 2)];
    cfg.align.aligned_heads = 2;
    cfg.train.steps = 10;
    cfg.train.batch = 4;
    cfg.train.lr = 1e-3;
    cfg.train.eval_every = 5;
    cfg.train.ckpt_every = 5;
    cfg.schedule.tau = Some(5);
    cfg.schedule.probe_every = 5;
    cfg.schedule.probe.size = 4;
    cfg.schedule.probe.t_grid = vec![0.05, 0.5];
    cfg.sampler.eval_samples = 8;
    cfg.sampler.sampler.nfes = 4;
    cfg.data.pool = 100;
    cfg.data.progress_images = 4;
    cfg.validate().unwrap();
    cfg
}

/// A frozen, randomly initialised teacher matching `cfg`.
pub fn tiny_teacher(cfg: &RunConfig) -> Teacher {
    let mut t = Teacher::init(cfg.teacher.cfg.clone(), &mut Rng::new(99)).unwrap();
    t.freeze();
    t
}

/// The desk architecture with a small data pool and cheap evaluation, for
/// end-to-end runs of a hundred steps.
pub fn short_desk_config(teacher_path: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.teacher.checkpoint = Some(teacher_path.to_path_buf());
    cfg.train.steps = 100;
    cfg.train.eval_every = 50;
    cfg.train.ckpt_every = 50;
    cfg.schedule.tau = Some(60);
    cfg.schedule.probe_every = 50;
    cfg.schedule.probe.size = 8;
    cfg.sampler.eval_samples = 32;
    cfg.sampler.sampler.nfes = 8;
    cfg.data.pool = 400;
    cfg.data.progress_images = 8;
    cfg.validate().unwrap();
    cfg
}

/// Save a frozen random teacher of the desk shape and return its path.
pub fn desk_teacher(dir: &std::path::Path) -> std::path::PathBuf {
    let mut t = Teacher::init(TeacherConfig::desk(), &mut Rng::new(7)).unwrap();
    t.freeze();
    let path = dir.join("teacher.hste");
    t.save(&path).unwrap();
    path
}
