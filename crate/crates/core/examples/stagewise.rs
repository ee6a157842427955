//! A short run with holistic alignment that is switched off at step tau,
//! printing the logged rows around the switch.
//!
//! ```text
//! cargo run --release --example stagewise
//! ```

use holalign::config::RunConfig;
use holalign::ndgrad::Rng;
use holalign::student::StudentConfig;
use holalign::teacher::{Teacher, TeacherConfig};
use holalign::trainer::{RunLog, RunState, Trainer, METRICS_HEADER};

fn main() -> holalign::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.student = StudentConfig { depth: 3, width: 32, heads: 2, ..StudentConfig::desk() };
    cfg.teacher.cfg = TeacherConfig { depth: 4, width: 48, heads: 2, ..TeacherConfig::desk() };
    cfg.align.feature_depth = 1;
    cfg.align.pairs = vec![(0, 2), (1, 3)];
    cfg.align.aligned_heads = 2;
    cfg.train.steps = 40;
    cfg.train.batch = 16;
    cfg.train.lr = 1e-3;
    cfg.train.eval_every = 20;
    cfg.schedule.tau = Some(25);
    cfg.schedule.probe_every = 20;
    cfg.schedule.probe.size = 16;
    cfg.sampler.eval_samples = 48;
    cfg.sampler.sampler.nfes = 10;
    cfg.data.pool = 600;
    cfg.data.progress_images = 16;
    cfg.validate()?;

    // An untrained frozen encoder keeps the example quick; see `teacher`.
    let mut teacher = Teacher::init(cfg.teacher.cfg.clone(), &mut Rng::new(0))?;
    teacher.freeze();
    let trainer = Trainer::new(cfg.clone(), &teacher)?;
    let mut state = RunState::init(&cfg)?;
    let mut log = RunLog::default();
    trainer.run(&mut state, &mut log, None)?;

    println!("{METRICS_HEADER}");
    for row in log.metrics.iter().filter(|r| r.step % 5 == 0 || (23..=27).contains(&r.step)) {
        println!("{}", row.to_csv());
    }
    println!("terminated: {} (alignment columns are empty from row {})", state.terminated, cfg.schedule.tau.unwrap() + 1);
    Ok(())
}
