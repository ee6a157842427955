//! Desk-scale experiment recipes and a result cache, so multi-seed
//! comparisons can be resumed and re-read instead of recomputed.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::synthdata::{self, ShapeConfig};
use crate::teacher::{pretrain_teacher, Teacher};
use crate::trainer::{latest_checkpoint, load_checkpoint, run_dir, RunLog, RunState, TrainData, Trainer};

/// The training variants compared at desk scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Recipe {
    /// Denoising loss only.
    Vanilla,
    /// Feature and attention alignment for the whole run.
    HolisticAlways,
    /// Feature and attention alignment dropped at step `tau`.
    HolisticUntil(u64),
    /// Feature alignment only.
    RepaOnly,
    /// Attention alignment only.
    AttaOnly,
    /// Feature alignment against a teacher that sees low-passed images.
    RepaLowPass(f64),
}

impl Recipe {
    pub fn label(&self) -> String {
        match self {
            Recipe::Vanilla => "vanilla".into(),
            Recipe::HolisticAlways => "holistic-always".into(),
            Recipe::HolisticUntil(t) => format!("holistic-tau{t}"),
            Recipe::RepaOnly => "repa-only".into(),
            Recipe::AttaOnly => "atta-only".into(),
            Recipe::RepaLowPass(k) => format!("repa-lowpass{k}"),
        }
    }

    /// The desk configuration of this recipe for one seed and budget.
    pub fn config(&self, base: &RunConfig, seed: u64, steps: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        cfg.train.steps = steps;
        cfg.schedule.tau = None;
        let (r, a) = (crate::align::LAMBDA_REPA, crate::align::LAMBDA_ATTA);
        match *self {
            Recipe::Vanilla => (cfg.align.lambda_repa, cfg.align.lambda_atta) = (0.0, 0.0),
            Recipe::HolisticAlways => (cfg.align.lambda_repa, cfg.align.lambda_atta) = (r, a),
            Recipe::HolisticUntil(t) => {
                (cfg.align.lambda_repa, cfg.align.lambda_atta) = (r, a);
                cfg.schedule.tau = Some(t);
            }
            Recipe::RepaOnly => (cfg.align.lambda_repa, cfg.align.lambda_atta) = (r, 0.0),
            Recipe::AttaOnly => (cfg.align.lambda_repa, cfg.align.lambda_atta) = (0.0, a),
            Recipe::RepaLowPass(k) => {
                (cfg.align.lambda_repa, cfg.align.lambda_atta) = (r, 0.0);
                cfg.teacher.low_pass = Some(k);
            }
        }
        cfg
    }
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Pretrained teacher with its holdout accuracy.
#[derive(Clone, Debug)]
pub struct TeacherRecord {
    pub teacher: Teacher,
    pub holdout_accuracy: f64,
}

/// Pretrain the teacher described by `cfg` on its data pool.
pub fn pretrain_for(cfg: &RunConfig) -> Result<TeacherRecord> {
    let shapes = ShapeConfig { size: cfg.teacher.cfg.image_size, classes: cfg.teacher.cfg.classes };
    let (train, hold) = synthdata::split(synthdata::gen(cfg.data.seed, cfg.data.pool, shapes)?, cfg.data.holdout_fraction)?;
    let (teacher, report) = pretrain_teacher(cfg.teacher.cfg.clone(), &train, &hold, &cfg.teacher.pretrain)?;
    if let Some(w) = &report.divergence_warning {
        eprintln!("warning: {w}");
    }
    Ok(TeacherRecord { teacher, holdout_accuracy: report.holdout_accuracy })
}

/// Runs and teachers cached under a directory, keyed by configuration.
pub struct Lab {
    pub root: PathBuf,
    data: RefCell<HashMap<String, Arc<TrainData>>>,
}

impl Lab {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), data: RefCell::new(HashMap::new()) }
    }

    fn teacher_key(cfg: &RunConfig) -> String {
        let mut probe = RunConfig::default();
        probe.teacher.cfg = cfg.teacher.cfg.clone();
        probe.teacher.pretrain = cfg.teacher.pretrain.clone();
        probe.data = cfg.data.clone();
        digest(&["teacher", &probe.to_text()])
    }

    /// The configured teacher checkpoint, or a cached pretrained one.
    pub fn teacher(&self, cfg: &RunConfig) -> Result<TeacherRecord> {
        if let Some(path) = &cfg.teacher.checkpoint {
            return Ok(TeacherRecord { teacher: Teacher::load(path)?, holdout_accuracy: f64::NAN });
        }
        let dir = self.root.join("teachers");
        fs::create_dir_all(&dir)?;
        let key = Self::teacher_key(cfg);
        let (path, info) = (dir.join(format!("{key}.hste")), dir.join(format!("{key}.json")));
        if path.exists() && info.exists() {
            let acc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&info)?)
                .map_err(|e| Error::Format(format!("{}: {e}", info.display())))?;
            return Ok(TeacherRecord {
                teacher: Teacher::load(&path)?,
                holdout_accuracy: acc["holdout_accuracy"].as_f64().unwrap_or(f64::NAN),
            });
        }
        let rec = pretrain_for(cfg)?;
        rec.teacher.save(&path)?;
        crate::checkpoint::write_atomic(&info, serde_json::json!({ "holdout_accuracy": rec.holdout_accuracy }).to_string().as_bytes())?;
        Ok(rec)
    }

    /// Shared run data; configurations that differ only in optimisation,
    /// loss weights or termination reuse the same instance.
    pub fn data(&self, cfg: &RunConfig, teacher: &Teacher) -> Result<Arc<TrainData>> {
        let mut norm = cfg.clone();
        norm.train = Default::default();
        norm.align.lambda_repa = 0.0;
        norm.align.lambda_atta = 0.0;
        norm.schedule.tau = None;
        let key = digest(&[&norm.to_text(), &teacher.checksum()]);
        if let Some(d) = self.data.borrow().get(&key) {
            return Ok(d.clone());
        }
        let d = Arc::new(TrainData::build(cfg, teacher)?);
        self.data.borrow_mut().insert(key, d.clone());
        Ok(d)
    }

    pub fn run_dir(&self, label: &str, cfg: &RunConfig, teacher: &Teacher) -> PathBuf {
        self.root.join("runs").join(format!("{label}-s{}-{}", cfg.train.seed, digest(&[&cfg.to_text(), &teacher.checksum()])))
    }

    fn finished(dir: &Path, cfg: &RunConfig) -> Result<bool> {
        Ok(latest_checkpoint(dir)?.is_some_and(|(step, _)| step == cfg.train.steps))
    }

    /// The log of a finished run, if it and its teacher are in the cache;
    /// never trains.
    pub fn cached(&self, label: &str, cfg: &RunConfig) -> Result<Option<RunLog>> {
        let teacher = match &cfg.teacher.checkpoint {
            Some(path) => Teacher::load(path)?,
            None => {
                let path = self.root.join("teachers").join(format!("{}.hste", Self::teacher_key(cfg)));
                if !path.exists() {
                    return Ok(None);
                }
                Teacher::load(&path)?
            }
        };
        let dir = self.run_dir(label, cfg, &teacher);
        if Self::finished(&dir, cfg)? {
            RunLog::read(&dir).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Run (or resume, or re-read) the configuration under `label`.
    pub fn run(&self, label: &str, cfg: &RunConfig) -> Result<RunLog> {
        let teacher = self.teacher(cfg)?.teacher;
        let dir = self.run_dir(label, cfg, &teacher);
        if Self::finished(&dir, cfg)? {
            return RunLog::read(&dir);
        }
        let trainer = Trainer::with_data(cfg.clone(), self.data(cfg, &teacher)?)?;
        let (_, log) = run_dir(&trainer, &dir)?;
        Ok(log)
    }

    /// Run `cfg` starting from the state of `parent` after `step` updates;
    /// valid when both configurations train identically up to `step`.
    pub fn fork(&self, label: &str, cfg: &RunConfig, parent_label: &str, parent: &RunConfig, step: u64) -> Result<RunLog> {
        let teacher = self.teacher(cfg)?.teacher;
        let dir = self.run_dir(label, cfg, &teacher);
        if Self::finished(&dir, cfg)? {
            return RunLog::read(&dir);
        }
        let trainer = Trainer::with_data(cfg.clone(), self.data(cfg, &teacher)?)?;
        if latest_checkpoint(&dir)?.is_some_and(|(s, _)| s > step) {
            let (_, log) = run_dir(&trainer, &dir)?;
            return Ok(log);
        }
        let pdir = self.run_dir(parent_label, parent, &teacher);
        let ppath = pdir.join(crate::trainer::checkpoint_name(step));
        if !ppath.exists() {
            self.run(parent_label, parent)?;
        }
        let (state, _): (RunState, RunConfig) = load_checkpoint(&ppath)?;
        let mut log = RunLog::read(&pdir)?;
        log.truncate(step);
        let mut state = state;
        trainer.run(&mut state, &mut log, Some(&dir))?;
        Ok(log)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Outcome of one desk-scale trend check.
#[derive(Clone, Debug)]
pub struct TrendCheck {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// The multi-seed desk comparison: which recipes run, for how long, and
/// how their logs are compared.
#[derive(Clone, Debug)]
pub struct DeskSuite {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    /// Length of the full-length runs.
    pub steps: u64,
    /// Early comparison point.
    pub early: u64,
    /// Termination step of the stage-wise recipe.
    pub tau: u64,
    /// Probe rows at or after this step enter the conflict comparison.
    pub late: u64,
    /// Low-pass radius of the filtered-teacher recipe.
    pub low_pass: f64,
}

impl Default for DeskSuite {
    fn default() -> Self {
        let mut base = RunConfig::default();
        base.train.eval_every = 1000;
        base.train.ckpt_every = 1000;
        base.schedule.probe_every = 1000;
        Self { base, seeds: vec![0, 1, 2], steps: 10_000, early: 2000, tau: 5000, late: 8000, low_pass: 2.0 }
    }
}

/// Logs of every run in a [`DeskSuite`], indexed like `seeds`.
#[derive(Clone, Debug, Default)]
pub struct DeskLogs {
    pub vanilla: Vec<RunLog>,
    pub always: Vec<RunLog>,
    pub terminated: Vec<RunLog>,
    pub repa: Vec<RunLog>,
    pub atta: Vec<RunLog>,
    pub low_pass: Vec<RunLog>,
}

impl DeskSuite {
    /// Every (label, recipe, steps) the suite trains, per seed.
    pub fn plan(&self) -> Vec<(Recipe, u64)> {
        vec![
            (Recipe::Vanilla, self.early),
            (Recipe::HolisticAlways, self.steps),
            (Recipe::HolisticUntil(self.tau), self.steps),
            (Recipe::RepaOnly, self.steps),
            (Recipe::AttaOnly, self.tau),
            (Recipe::RepaLowPass(self.low_pass), self.early),
        ]
    }

    fn one(&self, lab: &Lab, recipe: Recipe, steps: u64, seed: u64) -> Result<RunLog> {
        let cfg = recipe.config(&self.base, seed, steps);
        match recipe {
            // Identical to holistic-always before tau, so it starts from there.
            Recipe::HolisticUntil(tau) => {
                let parent = Recipe::HolisticAlways.config(&self.base, seed, steps);
                lab.fork(&recipe.label(), &cfg, &Recipe::HolisticAlways.label(), &parent, tau)
            }
            _ => lab.run(&recipe.label(), &cfg),
        }
    }

    /// Train (or re-read) every run; `progress` is told about each one.
    pub fn collect(&self, lab: &Lab, progress: &mut dyn FnMut(&str, u64)) -> Result<DeskLogs> {
        self.gather(lab, true, progress).map(|l| l.expect("training fills every run"))
    }

    /// Every run's log if all of them are already cached, without training.
    pub fn cached(&self, lab: &Lab) -> Result<Option<DeskLogs>> {
        self.gather(lab, false, &mut |_, _| {})
    }

    fn gather(&self, lab: &Lab, train: bool, progress: &mut dyn FnMut(&str, u64)) -> Result<Option<DeskLogs>> {
        let mut logs = DeskLogs::default();
        for &seed in &self.seeds {
            for (recipe, steps) in self.plan() {
                progress(&recipe.label(), seed);
                let log = if train {
                    self.one(lab, recipe, steps, seed)?
                } else {
                    match lab.cached(&recipe.label(), &recipe.config(&self.base, seed, steps))? {
                        Some(log) => log,
                        None => return Ok(None),
                    }
                };
                match recipe {
                    Recipe::Vanilla => logs.vanilla.push(log),
                    Recipe::HolisticAlways => logs.always.push(log),
                    Recipe::HolisticUntil(_) => logs.terminated.push(log),
                    Recipe::RepaOnly => logs.repa.push(log),
                    Recipe::AttaOnly => logs.atta.push(log),
                    Recipe::RepaLowPass(_) => logs.low_pass.push(log),
                }
            }
        }
        Ok(Some(logs))
    }

    /// Median over seeds of a logged column at `step`.
    pub fn median_at(logs: &[RunLog], step: u64, col: impl Fn(&crate::trainer::MetricsRow) -> Option<f64>) -> Result<f64> {
        let vals = logs
            .iter()
            .map(|l| l.row(step).and_then(&col).ok_or_else(|| Error::Contract(format!("no logged value at step {step}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(median(vals))
    }

    /// Median of ρ at timestep `t` over every probe at or after `from`.
    pub fn median_rho(logs: &[RunLog], t: f32, from: u64) -> f64 {
        median(logs.iter().flat_map(|l| l.diag.iter()).filter(|d| d.step >= from && d.t == t).map(|d| d.rho).collect())
    }

    /// Compare the logs against the expected qualitative trends.
    pub fn checks(&self, logs: &DeskLogs) -> Result<Vec<TrendCheck>> {
        let mmd = |r: &crate::trainer::MetricsRow| r.mmd;
        let feat = |r: &crate::trainer::MetricsRow| r.feat_cos;
        let ce = |r: &crate::trainer::MetricsRow| r.attn_ce;
        let (early, steps, tau) = (self.early, self.steps, self.tau);
        let mut out = Vec::new();

        let v = Self::median_at(&logs.vanilla, early, mmd)?;
        let a = Self::median_at(&logs.always, early, mmd)?;
        let t = Self::median_at(&logs.terminated, early, mmd)?;
        let a_end = Self::median_at(&logs.always, steps, mmd)?;
        let t_end = Self::median_at(&logs.terminated, steps, mmd)?;
        out.push(TrendCheck {
            id: 6,
            name: "early acceleration and termination benefit",
            pass: a < v && t < v && t_end <= a_end,
            detail: format!("mmd@{early}: vanilla {v:.5} always {a:.5} tau {t:.5}; mmd@{steps}: always {a_end:.5} tau {t_end:.5}"),
        });

        let f0 = Self::median_at(&logs.atta, 0, feat)?;
        let f1 = Self::median_at(&logs.atta, tau, feat)?;
        out.push(TrendCheck {
            id: 7,
            name: "attention alignment pulls features",
            pass: f1 - f0 >= 0.1,
            detail: format!("atta-only feat_cos {f0:.4} -> {f1:.4} at {tau} (gain {:.4}, need 0.1)", f1 - f0),
        });

        let r0 = Self::median_at(&logs.repa, 0, ce)?;
        let r1 = Self::median_at(&logs.repa, steps, ce)?;
        let a2 = Self::median_at(&logs.atta, early, ce)?;
        out.push(TrendCheck {
            id: 8,
            name: "feature alignment pulls attention, slowly",
            pass: r1 < r0 && a2 < r1,
            detail: format!("repa-only attn_ce {r0:.4} -> {r1:.4} at {steps}; atta-only attn_ce {a2:.4} at {early}"),
        });

        let full = Self::median_at(&logs.repa, early, mmd)?;
        let low = Self::median_at(&logs.low_pass, early, mmd)?;
        out.push(TrendCheck {
            id: 9,
            name: "low-pass teacher inputs suffice",
            pass: low <= 1.3 * full,
            detail: format!("mmd@{early}: full {full:.5} low-pass {low:.5} (ratio {:.3}, limit 1.3)", low / full),
        });

        let lo = Self::median_rho(&logs.always, 0.05, self.late);
        let hi = Self::median_rho(&logs.always, 0.5, self.late);
        out.push(TrendCheck {
            id: 10,
            name: "timestep conflict ordering",
            pass: lo < hi,
            detail: format!("holistic-always rho from step {}: t=0.05 {lo:.4}, t=0.5 {hi:.4}", self.late),
        });
        Ok(out)
    }
}
