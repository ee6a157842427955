//! The run configuration file: `key = value` lines under `[section]`
//! headers, `#` comments. Every key is optional and falls back to its
//! documented default; unknown sections and keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::align::{default_pairing, AlignConfig, Preset};
use crate::error::{Error, Result};
use crate::interpolant::{Diffusion, SamplerConfig, SamplerKind};
use crate::schedule::{ProbeLoss, ProbeSpec, TerminationPolicy};
use crate::student::StudentConfig;
use crate::teacher::{PretrainConfig, TeacherConfig};

pub const SECTIONS: [&str; 7] = ["student", "teacher", "align", "schedule", "train", "sampler", "data"];

/// Frozen-encoder settings: architecture, where its weights live, how to
/// pretrain it, and an optional low-pass filter on its inputs.
#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct TeacherSection {
    pub cfg: TeacherConfig,
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    /// Radial cutoff applied to the encoder's input images, if any.
    pub low_pass: Option<f64>,
}


#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Fixed,
    GradAngle,
}

/// Termination rule and gradient-conflict probe settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub policy: PolicyKind,
    /// Switch step of the fixed rule; `None` keeps alignment on throughout.
    pub tau: Option<u64>,
    pub window: usize,
    pub threshold: f64,
    pub check_every: u64,
    /// Steps between logged probes; 0 disables them.
    pub probe_every: u64,
    pub probe: ProbeSpec,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Fixed,
            tau: Some(5000),
            window: 5,
            threshold: 0.0,
            check_every: 500,
            probe_every: 500,
            probe: ProbeSpec { loss: ProbeLoss::Holistic, ..ProbeSpec::default() },
        }
    }
}

impl ScheduleConfig {
    pub fn termination(&self) -> TerminationPolicy {
        match self.policy {
            PolicyKind::Fixed => match self.tau {
                Some(tau) => TerminationPolicy::FixedIter { tau },
                None => TerminationPolicy::never(),
            },
            PolicyKind::GradAngle => TerminationPolicy::GradAngle {
                window: self.window,
                threshold: self.threshold,
                probe: self.probe.clone(),
                check_every: self.check_every,
            },
        }
    }
}

/// Optimisation settings; the defaults are the reference values (constant
/// learning rate 1e-4, betas 0.9/0.999, no weight decay) at the desk batch
/// size and budget.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Steps between evaluations (step 0 is always evaluated); 0 disables.
    pub eval_every: u64,
    /// Steps between checkpoints (the last step always gets one); 0 disables.
    pub ckpt_every: u64,
    /// Record per-step wall time; off by default so logs are reproducible.
    pub log_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 500,
            ckpt_every: 1000,
            log_wall_ms: false,
        }
    }
}

/// Evaluation sampler plus the number of generated images per evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSection {
    pub sampler: SamplerConfig,
    pub eval_samples: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { sampler: SamplerConfig::default(), eval_samples: 512 }
    }
}

/// Dataset pool and the fixed images used for alignment-progress metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub pool: usize,
    pub holdout_fraction: f64,
    pub progress_images: usize,
    pub progress_t: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, pool: 10_000, holdout_fraction: 0.1, progress_images: 64, progress_t: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub student: StudentConfig,
    pub teacher: TeacherSection,
    pub align: AlignConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let student = StudentConfig::desk();
        let teacher = TeacherSection::default();
        let align = default_pairing(&student, &teacher.cfg, Preset::Desk).expect("desk pairing is valid");
        Self {
            student,
            teacher,
            align,
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerSection::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.teacher.cfg.validate()?;
        self.align.validate(&self.student, &self.teacher.cfg)?;
        self.schedule.termination().validate()?;
        self.schedule.probe.validate()?;
        if let Some(b) = self.schedule.probe.block_index {
            if b >= self.student.depth {
                return Err(Error::Config(format!("probe block {b} outside a {}-block student", self.student.depth)));
            }
        }
        self.sampler.sampler.validate()?;
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("batch, lr, betas or weight decay out of range".into()));
        }
        if let Some(k) = self.teacher.low_pass {
            if !(k >= 0.0) {
                return Err(Error::Config(format!("low-pass cutoff must be >= 0, got {k}")));
            }
        }
        let d = &self.data;
        if !(d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0) || d.pool < 2 {
            return Err(Error::Config("data pool must have >= 2 images and holdout fraction in (0, 1)".into()));
        }
        let holdout = (d.holdout_fraction * d.pool as f64).round() as usize;
        let need = self.sampler.eval_samples.max(d.progress_images).max(self.schedule.probe.size);
        if holdout < need || self.sampler.eval_samples < 2 || d.progress_images == 0 {
            return Err(Error::Config(format!(
                "holdout of {holdout} images cannot supply {need} evaluation/probe images (need >= 2 samples)"
            )));
        }
        if !(d.progress_t > 0.0 && d.progress_t <= 1.0) {
            return Err(Error::Config(format!("progress timestep must lie in (0, 1], got {}", d.progress_t)));
        }
        Ok(())
    }

    /// Stable digest of the serialized configuration.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, entries: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        let st = &self.student;
        section(
            "student",
            vec![
                ("depth", st.depth.to_string()),
                ("width", st.width.to_string()),
                ("heads", st.heads.to_string()),
                ("patch", st.patch.to_string()),
                ("image_size", st.image_size.to_string()),
                ("classes", st.classes.to_string()),
                ("time_dim", st.time_dim.to_string()),
                ("mlp_ratio", st.mlp_ratio.to_string()),
                ("label_dropout", st.label_dropout.to_string()),
            ],
        );
        let te = &self.teacher;
        section(
            "teacher",
            vec![
                ("depth", te.cfg.depth.to_string()),
                ("width", te.cfg.width.to_string()),
                ("heads", te.cfg.heads.to_string()),
                ("patch", te.cfg.patch.to_string()),
                ("image_size", te.cfg.image_size.to_string()),
                ("classes", te.cfg.classes.to_string()),
                ("mlp_ratio", te.cfg.mlp_ratio.to_string()),
                ("checkpoint", te.checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string())),
                ("low_pass", te.low_pass.map_or("none".into(), |k| k.to_string())),
                ("pretrain_steps", te.pretrain.steps.to_string()),
                ("pretrain_batch", te.pretrain.batch.to_string()),
                ("pretrain_lr", te.pretrain.lr.to_string()),
                ("pretrain_seed", te.pretrain.seed.to_string()),
            ],
        );
        let al = &self.align;
        section(
            "align",
            vec![
                ("lambda_repa", al.lambda_repa.to_string()),
                ("lambda_atta", al.lambda_atta.to_string()),
                ("feature_depth", al.feature_depth.to_string()),
                ("pairs", al.pairs.iter().map(|(s, t)| format!("{s}:{t}")).collect::<Vec<_>>().join(", ")),
                ("aligned_heads", al.aligned_heads.to_string()),
            ],
        );
        let sc = &self.schedule;
        section(
            "schedule",
            vec![
                ("policy", match sc.policy { PolicyKind::Fixed => "fixed", PolicyKind::GradAngle => "grad-angle" }.into()),
                ("tau", sc.tau.map_or("never".into(), |t| t.to_string())),
                ("window", sc.window.to_string()),
                ("threshold", sc.threshold.to_string()),
                ("check_every", sc.check_every.to_string()),
                ("probe_every", sc.probe_every.to_string()),
                ("probe_size", sc.probe.size.to_string()),
                ("probe_block", sc.probe.block_index.map_or("auto".into(), |b| b.to_string())),
                ("probe_t", join(&sc.probe.t_grid)),
                ("probe_seed", sc.probe.seed.to_string()),
                ("probe_loss", sc.probe.loss.as_str().into()),
            ],
        );
        let tr = &self.train;
        section(
            "train",
            vec![
                ("steps", tr.steps.to_string()),
                ("batch", tr.batch.to_string()),
                ("lr", tr.lr.to_string()),
                ("beta1", tr.beta1.to_string()),
                ("beta2", tr.beta2.to_string()),
                ("weight_decay", tr.weight_decay.to_string()),
                ("seed", tr.seed.to_string()),
                ("eval_every", tr.eval_every.to_string()),
                ("ckpt_every", tr.ckpt_every.to_string()),
                ("log_wall_ms", tr.log_wall_ms.to_string()),
            ],
        );
        let sa = &self.sampler.sampler;
        section(
            "sampler",
            vec![
                ("nfes", sa.nfes.to_string()),
                ("kind", match sa.kind { SamplerKind::Ode => "ode", SamplerKind::Sde => "sde" }.into()),
                ("cfg_scale", sa.cfg_scale.to_string()),
                ("guidance_interval", join(&[sa.guidance_interval.0, sa.guidance_interval.1])),
                ("t_min", sa.t_min.to_string()),
                ("diffusion", match sa.diffusion { Diffusion::Linear => "linear", Diffusion::Zero => "zero" }.into()),
                ("seed", sa.seed.to_string()),
                ("eval_samples", self.sampler.eval_samples.to_string()),
            ],
        );
        let da = &self.data;
        section(
            "data",
            vec![
                ("seed", da.seed.to_string()),
                ("pool", da.pool.to_string()),
                ("holdout_fraction", da.holdout_fraction.to_string()),
                ("progress_images", da.progress_images.to_string()),
                ("progress_t", da.progress_t.to_string()),
            ],
        );
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    }
}

fn join(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Key/value pairs of one section with their line numbers; keys are
/// consumed as they are read so leftovers can be reported.
struct Section {
    name: String,
    entries: IndexMap<String, (String, usize)>,
}

impl Section {
    fn take_with<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.entries.shift_remove(key) {
            None => Ok(default),
            Some((raw, line)) => parse(&raw)
                .ok_or_else(|| Error::Config(format!("line {line}: cannot parse [{}] {key} = {raw:?}", self.name))),
        }
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        self.take_with(key, default, |s| s.parse().ok())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key {k:?} in [{}]", self.name))),
        }
    }
}

fn optional<T: FromStr>(word: &'static str) -> impl Fn(&str) -> Option<Option<T>> {
    move |s| if s == word { Some(None) } else { s.parse().ok().map(Some) }
}

fn list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn pairs(s: &str) -> Option<Vec<(usize, usize)>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',')
        .map(|p| {
            let (a, b) = p.trim().split_once(':')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        })
        .collect()
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut sections: IndexMap<String, Section> = IndexMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                if sections.contains_key(name) {
                    return Err(Error::Config(format!("line {line_no}: section [{name}] repeated")));
                }
                sections.insert(name.to_string(), Section { name: name.to_string(), entries: IndexMap::new() });
                current = Some(name.to_string());
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            let sec = current
                .as_ref()
                .and_then(|c| sections.get_mut(c))
                .ok_or_else(|| Error::Config(format!("line {line_no}: key outside any section")))?;
            let key = key.trim().to_string();
            if sec.entries.contains_key(&key) {
                return Err(Error::Config(format!("line {line_no}: key {key:?} repeated in [{}]", sec.name)));
            }
            sec.entries.insert(key, (value.trim().to_string(), line_no));
        }
        let mut get = |name: &str| sections.shift_remove(name).unwrap_or(Section { name: name.into(), entries: IndexMap::new() });
        let d = RunConfig::default();

        let mut s = get("student");
        let student = StudentConfig {
            depth: s.take("depth", d.student.depth)?,
            width: s.take("width", d.student.width)?,
            heads: s.take("heads", d.student.heads)?,
            patch: s.take("patch", d.student.patch)?,
            image_size: s.take("image_size", d.student.image_size)?,
            classes: s.take("classes", d.student.classes)?,
            time_dim: s.take("time_dim", d.student.time_dim)?,
            mlp_ratio: s.take("mlp_ratio", d.student.mlp_ratio)?,
            label_dropout: s.take("label_dropout", d.student.label_dropout)?,
        };
        s.finish()?;

        let mut s = get("teacher");
        let dt = &d.teacher;
        let teacher = TeacherSection {
            cfg: TeacherConfig {
                depth: s.take("depth", dt.cfg.depth)?,
                width: s.take("width", dt.cfg.width)?,
                heads: s.take("heads", dt.cfg.heads)?,
                patch: s.take("patch", dt.cfg.patch)?,
                image_size: s.take("image_size", dt.cfg.image_size)?,
                classes: s.take("classes", dt.cfg.classes)?,
                mlp_ratio: s.take("mlp_ratio", dt.cfg.mlp_ratio)?,
            },
            checkpoint: s.take_with("checkpoint", None, optional::<PathBuf>("none"))?,
            low_pass: s.take_with("low_pass", None, optional::<f64>("none"))?,
            pretrain: PretrainConfig {
                steps: s.take("pretrain_steps", dt.pretrain.steps)?,
                batch: s.take("pretrain_batch", dt.pretrain.batch)?,
                lr: s.take("pretrain_lr", dt.pretrain.lr)?,
                seed: s.take("pretrain_seed", dt.pretrain.seed)?,
            },
        };
        s.finish()?;

        let mut s = get("align");
        let align = AlignConfig {
            lambda_repa: s.take("lambda_repa", d.align.lambda_repa)?,
            lambda_atta: s.take("lambda_atta", d.align.lambda_atta)?,
            feature_depth: s.take("feature_depth", d.align.feature_depth)?,
            pairs: s.take_with("pairs", d.align.pairs.clone(), pairs)?,
            aligned_heads: s.take("aligned_heads", d.align.aligned_heads)?,
        };
        s.finish()?;

        let mut s = get("schedule");
        let ds = &d.schedule;
        let schedule = ScheduleConfig {
            policy: s.take_with("policy", ds.policy, |v| match v {
                "fixed" => Some(PolicyKind::Fixed),
                "grad-angle" => Some(PolicyKind::GradAngle),
                _ => None,
            })?,
            tau: s.take_with("tau", ds.tau, optional::<u64>("never"))?,
            window: s.take("window", ds.window)?,
            threshold: s.take("threshold", ds.threshold)?,
            check_every: s.take("check_every", ds.check_every)?,
            probe_every: s.take("probe_every", ds.probe_every)?,
            probe: ProbeSpec {
                size: s.take("probe_size", ds.probe.size)?,
                block_index: s.take_with("probe_block", ds.probe.block_index, optional::<usize>("auto"))?,
                t_grid: s.take_with("probe_t", ds.probe.t_grid.clone(), list::<f32>)?,
                seed: s.take("probe_seed", ds.probe.seed)?,
                loss: s.take_with("probe_loss", ds.probe.loss, |v| ProbeLoss::parse(v).ok())?,
            },
        };
        s.finish()?;

        let mut s = get("train");
        let dr = &d.train;
        let train = TrainConfig {
            steps: s.take("steps", dr.steps)?,
            batch: s.take("batch", dr.batch)?,
            lr: s.take("lr", dr.lr)?,
            beta1: s.take("beta1", dr.beta1)?,
            beta2: s.take("beta2", dr.beta2)?,
            weight_decay: s.take("weight_decay", dr.weight_decay)?,
            seed: s.take("seed", dr.seed)?,
            eval_every: s.take("eval_every", dr.eval_every)?,
            ckpt_every: s.take("ckpt_every", dr.ckpt_every)?,
            log_wall_ms: s.take("log_wall_ms", dr.log_wall_ms)?,
        };
        s.finish()?;

        let mut s = get("sampler");
        let dp = &d.sampler.sampler;
        let sampler = SamplerSection {
            sampler: SamplerConfig {
                nfes: s.take("nfes", dp.nfes)?,
                kind: s.take_with("kind", dp.kind, |v| match v {
                    "ode" => Some(SamplerKind::Ode),
                    "sde" => Some(SamplerKind::Sde),
                    _ => None,
                })?,
                cfg_scale: s.take("cfg_scale", dp.cfg_scale)?,
                guidance_interval: s.take_with("guidance_interval", dp.guidance_interval, |v| match list::<f32>(v)?[..] {
                    [lo, hi] => Some((lo, hi)),
                    _ => None,
                })?,
                t_min: s.take("t_min", dp.t_min)?,
                diffusion: s.take_with("diffusion", dp.diffusion, |v| match v {
                    "linear" => Some(Diffusion::Linear),
                    "zero" => Some(Diffusion::Zero),
                    _ => None,
                })?,
                seed: s.take("seed", dp.seed)?,
            },
            eval_samples: s.take("eval_samples", d.sampler.eval_samples)?,
        };
        s.finish()?;

        let mut s = get("data");
        let data = DataConfig {
            seed: s.take("seed", d.data.seed)?,
            pool: s.take("pool", d.data.pool)?,
            holdout_fraction: s.take("holdout_fraction", d.data.holdout_fraction)?,
            progress_images: s.take("progress_images", d.data.progress_images)?,
            progress_t: s.take("progress_t", d.data.progress_t)?,
        };
        s.finish()?;

        let cfg = RunConfig { student, teacher, align, schedule, train, sampler, data };
        cfg.validate()?;
        Ok(cfg)
    }
}
