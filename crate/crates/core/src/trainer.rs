//! Joint optimisation of the student and projector: denoising loss plus the
//! weighted alignment terms until termination, then denoising alone.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::align::{hybrid_loss, Projector};
use crate::checkpoint::{self, Checkpoint, TensorKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{alignment_progress, energy_distance, mmd_rbf, Bandwidths, Progress, ProgressProbe};
use crate::interpolant::{diffusion_loss, sample, DiffusionBatch};
use crate::ndgrad::{Array, ParamSet, Rng, Tape};
use crate::optim::{AdamState, AdamW};
use crate::schedule::{alignment_active, probe_conflict, ConflictProbe, TerminationPolicy};
use crate::student::{apply_label_dropout, Student};
use crate::synthdata::{self, ShapeConfig};
use crate::teacher::{low_pass, Teacher, TeacherOutputs};

pub const METRICS_HEADER: &str = "step,loss_diff,loss_repa,loss_atta,rho_min_t,mmd,feat_cos,attn_ce,wall_ms";
pub const DIAG_HEADER: &str = "step,t,rho,loss_kind";

/// Everything that changes during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    /// Number of updates applied so far.
    pub step: u64,
    pub student: ParamSet,
    pub proj: ParamSet,
    pub opt_student: AdamState,
    pub opt_proj: AdamState,
    pub rng: Rng,
    /// Set once a step has run without alignment; never cleared.
    pub terminated: bool,
    /// `(step, ρ at the smallest probe timestep)` for the gradient-angle rule.
    pub probe_history: Vec<(u64, f64)>,
}

impl RunState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let root = Rng::new(cfg.train.seed);
        let student = Student::init(cfg.student.clone(), &mut root.split("student"))?.params;
        let proj = Projector::init(cfg.student.width, cfg.teacher.cfg.width, &mut root.split("proj"))?.params;
        Ok(Self {
            step: 0,
            opt_student: AdamState::new(&student),
            opt_proj: AdamState::new(&proj),
            student,
            proj,
            rng: root.split("train"),
            terminated: false,
            probe_history: Vec::new(),
        })
    }

    pub fn model(&self, cfg: &RunConfig) -> Student {
        Student { cfg: cfg.student.clone(), params: self.student.clone() }
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({ "kind": "run-state", "config": cfg.to_text() }));
        c.push_set("student/", TensorKind::Param, &self.student);
        c.push_set("proj/", TensorKind::Param, &self.proj);
        c.push_set("student/", TensorKind::Moment1, &self.opt_student.m);
        c.push_set("student/", TensorKind::Moment2, &self.opt_student.v);
        c.push_set("proj/", TensorKind::Moment1, &self.opt_proj.m);
        c.push_set("proj/", TensorKind::Moment2, &self.opt_proj.v);
        c.push("rng.seed", TensorKind::Rng, checkpoint::encode_u64(self.rng.seed()));
        c.push("rng.counter", TensorKind::Rng, checkpoint::encode_u128(self.rng.counter()));
        c.push("step", TensorKind::Meta, checkpoint::encode_u64(self.step));
        c.push("terminated", TensorKind::Meta, Array::scalar(self.terminated as u8 as f32));
        c.push("adam.student.step", TensorKind::Meta, checkpoint::encode_u64(self.opt_student.step));
        c.push("adam.proj.step", TensorKind::Meta, checkpoint::encode_u64(self.opt_proj.step));
        let flat = |f: &dyn Fn(&(u64, f64)) -> u64| -> Array {
            let parts: Vec<f32> =
                self.probe_history.iter().flat_map(|e| checkpoint::encode_u64(f(e)).into_data()).collect();
            Array::new(&[parts.len()], parts).expect("1-D")
        };
        c.push("probe_history.step", TensorKind::Meta, flat(&|e| e.0));
        c.push("probe_history.rho", TensorKind::Meta, flat(&|e| e.1.to_bits()));
        c
    }

    /// Restore a state and the configuration it was saved with.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, RunConfig)> {
        if c.meta["kind"] != "run-state" {
            return Err(Error::Format("not a training checkpoint".into()));
        }
        let cfg: RunConfig = c.meta["config"]
            .as_str()
            .ok_or_else(|| Error::Format("checkpoint lacks its configuration".into()))?
            .parse()?;
        let int = |name: &str, kind| checkpoint::decode_u64(c.get(name, kind)?);
        let ints = |name: &str| -> Result<Vec<u64>> {
            let a = c.get(name, TensorKind::Meta)?;
            if a.len() % 4 != 0 {
                return Err(Error::Format(format!("{name} is not a list of integers")));
            }
            a.data().chunks(4).map(|ch| checkpoint::decode_u64(&Array::new(&[4], ch.to_vec())?)).collect()
        };
        let (steps, rhos) = (ints("probe_history.step")?, ints("probe_history.rho")?);
        if steps.len() != rhos.len() {
            return Err(Error::Format("probe history columns differ in length".into()));
        }
        let state = Self {
            step: int("step", TensorKind::Meta)?,
            student: c.take_set("student/", TensorKind::Param)?,
            proj: c.take_set("proj/", TensorKind::Param)?,
            opt_student: AdamState {
                m: c.take_set("student/", TensorKind::Moment1)?,
                v: c.take_set("student/", TensorKind::Moment2)?,
                step: int("adam.student.step", TensorKind::Meta)?,
            },
            opt_proj: AdamState {
                m: c.take_set("proj/", TensorKind::Moment1)?,
                v: c.take_set("proj/", TensorKind::Moment2)?,
                step: int("adam.proj.step", TensorKind::Meta)?,
            },
            rng: Rng::restore(int("rng.seed", TensorKind::Rng)?, checkpoint::decode_u128(c.get("rng.counter", TensorKind::Rng)?)?),
            terminated: c.get("terminated", TensorKind::Meta)?.data().first() == Some(&1.0),
            probe_history: steps.into_iter().zip(rhos.into_iter().map(f64::from_bits)).collect(),
        };
        let template = RunState::init(&cfg)?;
        let same_layout = |a: &ParamSet, b: &ParamSet| {
            a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, x), (nb, y))| na == nb && x.shape() == y.shape())
        };
        if !same_layout(&state.student, &template.student)
            || !same_layout(&state.proj, &template.proj)
            || !same_layout(&state.opt_student.m, &state.student)
            || !same_layout(&state.opt_student.v, &state.student)
            || !same_layout(&state.opt_proj.m, &state.proj)
            || !same_layout(&state.opt_proj.v, &state.proj)
        {
            return Err(Error::Format("checkpoint tensors do not match its configuration".into()));
        }
        Ok((state, cfg))
    }
}

pub fn save_checkpoint(state: &RunState, cfg: &RunConfig, path: &Path) -> Result<()> {
    state.to_checkpoint(cfg).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(RunState, RunConfig)> {
    RunState::from_checkpoint(&Checkpoint::read(path)?)
}

/// Clean images, labels and (when alignment may run) their teacher targets.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x0: Array,
    pub labels: Vec<usize>,
    pub teacher: Option<TeacherOutputs>,
}

/// Scalars of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f32,
    pub diff: f32,
    pub repa: Option<f32>,
    pub atta: Option<f32>,
    /// Whether the alignment terms were part of this update.
    pub aligned: bool,
}

fn optimizer(cfg: &RunConfig) -> AdamW {
    let t = &cfg.train;
    AdamW { lr: t.lr, beta1: t.beta1, beta2: t.beta2, weight_decay: t.weight_decay, ..AdamW::default() }
}

/// One update: draw label dropout, timesteps and noise from the state's
/// stream; minimise the denoising loss plus, while alignment is active, the
/// weighted alignment terms; apply one AdamW step. The projector is only
/// updated on steps where its loss contributes.
pub fn train_step(state: &mut RunState, cfg: &RunConfig, batch: &TrainBatch) -> Result<StepMetrics> {
    let policy = cfg.schedule.termination();
    let active = !state.terminated && alignment_active(state.step, &policy, &state.probe_history);
    let al = &cfg.align;
    let aligned = active && (al.lambda_repa > 0.0 || al.lambda_atta > 0.0);
    let use_proj = aligned && al.lambda_repa > 0.0;

    let mut rng = Rng::new(state.rng.next_u64());
    let labels = apply_label_dropout(&batch.labels, cfg.student.label_dropout, cfg.student.null_label(), &mut rng)?;
    let db = DiffusionBatch::draw(batch.x0.clone(), labels, &mut rng)?;

    let mut tape: Tape = Tape::new();
    let sp = state.student.bind(&mut tape);
    let pp = if use_proj { state.proj.bind(&mut tape) } else { ParamSet::new().bind(&mut tape) };
    let x = tape.constant(db.x_t()?);
    let (v, trace) = Student::forward(&cfg.student, &mut tape, &sp, x, &db.t, &db.labels)?;
    let diff = diffusion_loss(&mut tape, v, &db)?;
    let (total, repa, atta) = if aligned {
        let targets = batch.teacher.as_ref().ok_or_else(|| Error::Contract("alignment step without teacher targets".into()))?;
        let parts = hybrid_loss(&mut tape, &trace, targets, &pp, al)?;
        (tape.add(diff, parts.total)?, parts.repa, parts.atta)
    } else {
        (diff, None, None)
    };
    tape.backward(total)?;
    let opt = optimizer(cfg);
    opt.step(&mut state.student, &sp.grads(&tape), &mut state.opt_student)?;
    if use_proj {
        opt.step(&mut state.proj, &pp.grads(&tape), &mut state.opt_proj)?;
    }
    if !active {
        state.terminated = true;
    }
    state.step += 1;
    let val = |v: crate::ndgrad::Var| tape.value(v).item();
    Ok(StepMetrics { loss: val(total), diff: val(diff), repa: repa.map(val), atta: atta.map(val), aligned })
}

/// One line of `metrics.csv`; absent values are empty fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_diff: Option<f32>,
    pub loss_repa: Option<f32>,
    pub loss_atta: Option<f32>,
    pub rho_min_t: Option<f64>,
    pub mmd: Option<f64>,
    pub feat_cos: Option<f64>,
    pub attn_ce: Option<f64>,
    pub wall_ms: Option<f64>,
}

fn field<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::Format(format!("bad csv field {s:?}")))
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            field(self.loss_diff),
            field(self.loss_repa),
            field(self.loss_atta),
            field(self.rho_min_t),
            field(self.mmd),
            field(self.feat_cos),
            field(self.attn_ce),
            field(self.wall_ms)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("metrics row has {} fields: {line:?}", f.len())));
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::Format(format!("bad step in {line:?}")))?,
            loss_diff: parse_field(f[1])?,
            loss_repa: parse_field(f[2])?,
            loss_atta: parse_field(f[3])?,
            rho_min_t: parse_field(f[4])?,
            mmd: parse_field(f[5])?,
            feat_cos: parse_field(f[6])?,
            attn_ce: parse_field(f[7])?,
            wall_ms: parse_field(f[8])?,
        })
    }
}

/// One line of `diag.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagRow {
    pub step: u64,
    pub t: f32,
    pub rho: f64,
    pub loss_kind: String,
}

impl DiagRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.t, self.rho, self.loss_kind)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("bad diag row {line:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            t: f[1].parse().map_err(|_| bad())?,
            rho: f[2].parse().map_err(|_| bad())?,
            loss_kind: f[3].to_string(),
        })
    }
}

/// Rows produced by a run, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub metrics: Vec<MetricsRow>,
    pub diag: Vec<DiagRow>,
}

impl RunLog {
    pub fn row(&self, step: u64) -> Option<&MetricsRow> {
        self.metrics.iter().find(|r| r.step == step)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let rows = |name: &str, header: &str| -> Result<Vec<String>> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(Vec::new());
            }
            let mut text = fs::read_to_string(path)?;
            // Every complete row ends in a newline; an interrupted append may
            // have left a partial one.
            if !text.ends_with('\n') {
                text.truncate(text.rfind('\n').map_or(0, |i| i + 1));
            }
            let mut lines = text.lines();
            if lines.next().is_some_and(|h| h != header) {
                return Err(Error::Format(format!("{name} has an unexpected header")));
            }
            Ok(lines.map(str::to_string).collect())
        };
        Ok(Self {
            metrics: rows("metrics.csv", METRICS_HEADER)?.iter().map(|l| MetricsRow::parse(l)).collect::<Result<_>>()?,
            diag: rows("diag.csv", DIAG_HEADER)?.iter().map(|l| DiagRow::parse(l)).collect::<Result<_>>()?,
        })
    }

    /// Drop rows logged after `step`.
    pub fn truncate(&mut self, step: u64) {
        self.metrics.retain(|r| r.step <= step);
        self.diag.retain(|r| r.step <= step);
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.metrics {
            let _ = writeln!(s, "{}", r.to_csv());
        }
        s
    }

    pub fn diag_csv(&self) -> String {
        let mut s = format!("{DIAG_HEADER}\n");
        for r in &self.diag {
            let _ = writeln!(s, "{}", r.to_csv());
        }
        s
    }
}

/// Fixed data of a run: the training pool with its teacher targets, the
/// held-out reference images, and the probe sets.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: Array,
    pub labels: Vec<usize>,
    pub targets: TeacherOutputs,
    /// Held-out images flattened to `[n, H * W]` for sample-quality metrics.
    pub reference: Array,
    pub progress: ProgressProbe,
    pub probe: ConflictProbe,
    pub teacher_checksum: String,
}

impl TrainData {
    pub fn build(cfg: &RunConfig, teacher: &Teacher) -> Result<Self> {
        cfg.validate()?;
        if teacher.cfg != cfg.teacher.cfg {
            return Err(Error::Config("teacher weights do not match the [teacher] architecture".into()));
        }
        let d = &cfg.data;
        let shapes = ShapeConfig { size: cfg.student.image_size, classes: cfg.student.classes };
        let (train, hold) = synthdata::split(synthdata::gen(d.seed, d.pool, shapes)?, d.holdout_fraction)?;
        let (images, labels) = synthdata::batch(&train.iter().collect::<Vec<_>>())?;
        let (hold_images, hold_labels) = synthdata::batch(&hold.iter().collect::<Vec<_>>())?;
        let layers: Vec<usize> = cfg.align.pairs.iter().map(|p| p.1).collect();
        let encode = |x: &Array| -> Result<TeacherOutputs> {
            match cfg.teacher.low_pass {
                Some(k) => teacher.encode_all(&low_pass(x, k)?, 256, &layers),
                None => teacher.encode_all(x, 256, &layers),
            }
        };
        let targets = encode(&images)?;
        let pixels = cfg.student.image_size * cfg.student.image_size;
        let n_ref = cfg.sampler.eval_samples;
        let reference = Array::new(&[n_ref, pixels], hold_images.data()[..n_ref * pixels].to_vec())?;

        let rows = |idx: &[usize]| -> Result<Array> { Array::stack(&idx.iter().map(|&i| hold_images.index0(i)).collect::<Result<Vec<_>>>()?) };
        let prog_idx: Vec<usize> = (0..d.progress_images).collect();
        let prog_images = rows(&prog_idx)?;
        let prog_targets = encode(&prog_images)?;
        let progress = ProgressProbe::new(
            prog_images,
            prog_idx.iter().map(|&i| hold_labels[i]).collect(),
            prog_targets,
            d.progress_t,
            d.seed,
        );

        let spec = &cfg.schedule.probe;
        let mut pick = Rng::new(spec.seed).split("probe-images");
        let mut order: Vec<usize> = (0..hold_labels.len()).collect();
        for i in 0..spec.size {
            let j = i + pick.below(order.len() - i);
            order.swap(i, j);
        }
        let probe_idx = &order[..spec.size];
        let probe_images = rows(probe_idx)?;
        let probe_targets = encode(&probe_images)?;
        let probe = ConflictProbe::new(
            probe_images,
            probe_idx.iter().map(|&i| hold_labels[i]).collect(),
            probe_targets,
            spec.block_index.unwrap_or(cfg.align.feature_depth),
            spec.t_grid.clone(),
            spec.seed,
            spec.loss,
        )?;
        Ok(Self { images, labels, targets, reference, progress, probe, teacher_checksum: teacher.checksum() })
    }
}

/// Sample-quality and alignment-progress metrics of one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mmd: f64,
    pub energy_distance: f64,
    pub progress: Progress,
}

/// A configured run over shared data.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub data: Arc<TrainData>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, teacher: &Teacher) -> Result<Self> {
        let data = Arc::new(TrainData::build(&cfg, teacher)?);
        Ok(Self { cfg, data })
    }

    /// Reuse data built for a configuration with the same data, teacher,
    /// alignment pairs and probe settings.
    pub fn with_data(cfg: RunConfig, data: Arc<TrainData>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, data })
    }

    /// Images for update `n`, a pure function of the seed and `n`.
    pub fn batch(&self, n: u64) -> Result<TrainBatch> {
        let mut rng = Rng::new(self.cfg.train.seed).split("batches").split_index("step", n);
        let pool = self.data.labels.len();
        let idx: Vec<usize> = (0..self.cfg.train.batch).map(|_| rng.below(pool)).collect();
        let x0 = Array::stack(&idx.iter().map(|&i| self.data.images.index0(i)).collect::<Result<Vec<_>>>()?)?;
        let labels = idx.iter().map(|&i| self.data.labels[i]).collect();
        let al = &self.cfg.align;
        let may_align = al.lambda_repa > 0.0 || al.lambda_atta > 0.0;
        let teacher = if may_align { Some(self.data.targets.select(&idx)?) } else { None };
        Ok(TrainBatch { x0, labels, teacher })
    }

    pub fn evaluate(&self, state: &RunState) -> Result<Evaluation> {
        let model = state.model(&self.cfg);
        let n = self.cfg.sampler.eval_samples;
        let size = self.cfg.student.image_size;
        let x = sample(&model, &self.cfg.sampler.sampler, n, size)?.reshape(&[n, size * size])?;
        Ok(Evaluation {
            mmd: mmd_rbf(&x, &self.data.reference, &Bandwidths::default())?,
            energy_distance: energy_distance(&x, &self.data.reference)?,
            progress: alignment_progress(&model, &state.proj, &self.data.progress, &self.cfg.align)?,
        })
    }

    /// ρ per probe timestep for the current parameters.
    pub fn probe(&self, state: &RunState) -> Result<Vec<(f32, f64)>> {
        probe_conflict(&state.model(&self.cfg), &state.proj, &self.data.probe, &self.cfg.align)
    }

    /// Metrics of the untrained state (the `step = 0` row).
    pub fn initial_row(&self, state: &RunState) -> Result<MetricsRow> {
        let mut row = MetricsRow { step: state.step, ..MetricsRow::default() };
        if self.cfg.train.eval_every > 0 {
            self.fill_eval(&mut row, state)?;
        }
        Ok(row)
    }

    fn fill_eval(&self, row: &mut MetricsRow, state: &RunState) -> Result<()> {
        let e = self.evaluate(state)?;
        row.mmd = Some(e.mmd);
        row.feat_cos = Some(e.progress.feat_cos);
        row.attn_ce = e.progress.attn_ce.is_finite().then_some(e.progress.attn_ce);
        Ok(())
    }

    /// Advance `state` to the configured number of steps, appending rows to
    /// `log` and, when `out` is given, to its CSV files and checkpoints.
    pub fn run(&self, state: &mut RunState, log: &mut RunLog, out: Option<&Path>) -> Result<()> {
        let mut files = out.map(|dir| RunFiles::open(dir, state.step, log)).transpose()?;
        if state.step == 0 && log.metrics.is_empty() {
            let row = self.initial_row(state)?;
            if let Some(f) = files.as_mut() {
                f.metrics(&row)?;
            }
            log.metrics.push(row);
        }
        let t = &self.cfg.train;
        let policy = self.cfg.schedule.termination();
        let mut last_ckpt: Option<PathBuf> = None;
        while state.step < t.steps {
            let batch = self.batch(state.step)?;
            let started = Instant::now();
            let m = train_step(state, &self.cfg, &batch).map_err(|e| match e {
                Error::Numeric(d) => Error::Numeric(format!(
                    "{d} (step {}); last good checkpoint: {}",
                    state.step + 1,
                    last_ckpt.as_ref().map_or("none".into(), |p| p.display().to_string())
                )),
                other => other,
            })?;
            let wall = started.elapsed().as_secs_f64() * 1e3;
            let k = state.step;
            let mut row = MetricsRow {
                step: k,
                loss_diff: Some(m.diff),
                loss_repa: m.repa,
                loss_atta: m.atta,
                wall_ms: t.log_wall_ms.then_some(wall),
                ..MetricsRow::default()
            };
            if t.eval_every > 0 && k.is_multiple_of(t.eval_every) {
                self.fill_eval(&mut row, state)?;
            }
            let logged = self.cfg.schedule.probe_every > 0 && k.is_multiple_of(self.cfg.schedule.probe_every);
            let check = match &policy {
                TerminationPolicy::GradAngle { check_every, .. } => !state.terminated && k.is_multiple_of(*check_every),
                TerminationPolicy::FixedIter { .. } => false,
            };
            if logged || check {
                let rhos = self.probe(state)?;
                let at_min = rhos.iter().min_by(|a, b| a.0.total_cmp(&b.0)).map(|e| e.1).expect("nonempty grid");
                if logged {
                    row.rho_min_t = Some(at_min);
                    for &(tt, rho) in &rhos {
                        let d = DiagRow { step: k, t: tt, rho, loss_kind: self.data.probe.loss.as_str().into() };
                        if let Some(f) = files.as_mut() {
                            f.diag(&d)?;
                        }
                        log.diag.push(d);
                    }
                }
                if check {
                    state.probe_history.push((k, at_min));
                }
            }
            if let Some(f) = files.as_mut() {
                f.metrics(&row)?;
            }
            log.metrics.push(row);
            let ckpt_due = (t.ckpt_every > 0 && k.is_multiple_of(t.ckpt_every)) || k == t.steps;
            if let (Some(f), true) = (files.as_mut(), ckpt_due) {
                f.flush()?;
                let path = f.dir.join(checkpoint_name(k));
                save_checkpoint(state, &self.cfg, &path)?;
                last_ckpt = Some(path);
            }
        }
        if let Some(f) = files.as_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.hste")
}

/// The newest `ckpt_*.hste` in `dir` and its step.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name.strip_prefix("ckpt_").and_then(|r| r.strip_suffix(".hste")).and_then(|s| s.parse::<u64>().ok()) {
            if best.as_ref().is_none_or(|b| step > b.0) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Append-only CSV sinks of a run directory.
struct RunFiles {
    dir: PathBuf,
    metrics: BufWriter<File>,
    diag: BufWriter<File>,
}

impl RunFiles {
    /// Start fresh at step 0, or keep only rows up to `step` when resuming.
    fn open(dir: &Path, step: u64, log: &RunLog) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut kept = log.clone();
        kept.truncate(step);
        let prepare = |name: &str, text: String| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            checkpoint::write_atomic(&path, text.as_bytes())?;
            Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?))
        };
        let (m, d) = if step == 0 && log.metrics.is_empty() {
            (format!("{METRICS_HEADER}\n"), format!("{DIAG_HEADER}\n"))
        } else {
            (kept.metrics_csv(), kept.diag_csv())
        };
        Ok(Self { dir: dir.to_path_buf(), metrics: prepare("metrics.csv", m)?, diag: prepare("diag.csv", d)? })
    }

    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv())?;
        Ok(())
    }

    fn diag(&mut self, row: &DiagRow) -> Result<()> {
        writeln!(self.diag, "{}", row.to_csv())?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.diag.flush()?;
        Ok(())
    }
}

/// Start or resume the run in `dir`: the newest checkpoint there (if any)
/// is loaded, logged rows after it are discarded, and training continues.
pub fn run_dir(trainer: &Trainer, dir: &Path) -> Result<(RunState, RunLog)> {
    let (mut state, mut log) = match latest_checkpoint(dir)? {
        Some((_, path)) => {
            let (state, saved) = load_checkpoint(&path)?;
            if saved != trainer.cfg {
                return Err(Error::Config(format!("{} was written by a different configuration", path.display())));
            }
            let mut log = RunLog::read(dir)?;
            log.truncate(state.step);
            (state, log)
        }
        None => (RunState::init(&trainer.cfg)?, RunLog::default()),
    };
    trainer.run(&mut state, &mut log, Some(dir))?;
    Ok((state, log))
}
