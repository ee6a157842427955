//! Command-line verbs. Each verb writes only inside its output directory and
//! reports failures as one `ERROR kind=... detail=...` line on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Parser, Subcommand};

use crate::checkpoint::{write_atomic, Checkpoint, TensorKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::MetricReport;
use crate::experiments::pretrain_for;
use crate::interpolant::{chain_labels, sample, Diffusion, SamplerKind};
use crate::ndgrad::Array;
use crate::schedule::{probe_conflict, ProbeLoss};
use crate::teacher::Teacher;
use crate::trainer::{load_checkpoint, run_dir, DiagRow, RunLog, Trainer, DIAG_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PLOT_MISSING: i32 = 4;

/// Python module that renders charts from run directories.
pub const PLOT_MODULE: &str = "holalign_plots";

#[derive(Parser, Debug)]
#[command(name = "holalign", about = "Desk-scale diffusion transformer training with representation alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Pretrain the frozen encoder and save it as `teacher.hste`.
    TeacherTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) a student run into a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate images from a training checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of images (defaults to one per class).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        nfes: Option<usize>,
        /// `ode` or `sde`.
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        cfg_scale: Option<f32>,
        /// Guidance interval as `lo,hi`.
        #[arg(long)]
        interval: Option<String>,
        #[arg(long)]
        t_min: Option<f32>,
        /// `linear` or `zero`.
        #[arg(long)]
        diffusion: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample-quality and alignment metrics of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the dataset whose holdout is the reference set.
        #[arg(long)]
        data_seed: Option<u64>,
        /// Teacher weights (defaults to the run's configured checkpoint).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Gradient-conflict probe of a checkpoint, written as `diag.csv`.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probe timesteps, comma separated.
        #[arg(long)]
        t: Option<String>,
        /// `repa`, `atta` or `holistic`.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        probe_size: Option<usize>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Render charts of run directories with the optional plotting component.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Print the machine-readable error line.
pub fn report(e: &Error) {
    let detail = e.to_string().replace(['\n', '\r'], " ");
    eprintln!("ERROR kind={} detail={detail}", e.kind());
}

/// Parse arguments and run one verb; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Verb::Plot { runs } = &cli.verb {
        return plot(runs);
    }
    match dispatch(cli.verb) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report(&e);
            exit_code(&e)
        }
    }
}

fn dispatch(verb: Verb) -> Result<()> {
    match verb {
        Verb::TeacherTrain { config, out } => teacher_train(&RunConfig::load(&config)?, &out),
        Verb::Train { config, out } => train(&RunConfig::load(&config)?, &out),
        Verb::Sample { ckpt, out, n, nfes, sampler, cfg_scale, interval, t_min, diffusion, seed } => {
            let (state, mut cfg) = load_checkpoint(&ckpt)?;
            let s = &mut cfg.sampler.sampler;
            if let Some(v) = nfes {
                s.nfes = v;
            }
            if let Some(v) = sampler {
                s.kind = match v.as_str() {
                    "ode" => SamplerKind::Ode,
                    "sde" => SamplerKind::Sde,
                    o => return Err(Error::Config(format!("unknown sampler {o:?}"))),
                };
            }
            if let Some(v) = cfg_scale {
                s.cfg_scale = v;
            }
            if let Some(v) = interval {
                let parts: Vec<f32> = parse_list(&v)?;
                match parts[..] {
                    [lo, hi] => s.guidance_interval = (lo, hi),
                    _ => return Err(Error::Config(format!("interval needs two values, got {v:?}"))),
                }
            }
            if let Some(v) = t_min {
                s.t_min = v;
            }
            if let Some(v) = diffusion {
                s.diffusion = match v.as_str() {
                    "linear" => Diffusion::Linear,
                    "zero" => Diffusion::Zero,
                    o => return Err(Error::Config(format!("unknown diffusion {o:?}"))),
                };
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            s.validate()?;
            let n = n.unwrap_or(cfg.student.classes);
            if n == 0 {
                return Err(Error::Config("need at least one sample".into()));
            }
            let model = state.model(&cfg);
            let images = sample(&model, &cfg.sampler.sampler, n, cfg.student.image_size)?;
            fs::create_dir_all(&out)?;
            let mut c = Checkpoint::new(serde_json::json!({ "kind": "samples", "step": state.step }));
            let labels = chain_labels(n, cfg.student.classes);
            c.push("labels", TensorKind::Meta, Array::new(&[n], labels.iter().map(|&l| l as f32).collect())?);
            c.push("samples", TensorKind::Param, images.clone());
            c.write(&out.join("samples.hste"))?;
            write_atomic(&out.join("samples.pgm"), &pgm_grid(&images))?;
            println!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Verb::Eval { ckpt, out, data_seed, teacher } => {
            let (state, mut cfg) = load_checkpoint(&ckpt)?;
            if let Some(s) = data_seed {
                cfg.data.seed = s;
            }
            let teacher = run_teacher(&cfg, teacher.as_deref())?;
            let trainer = Trainer::new(cfg.clone(), &teacher)?;
            let e = trainer.evaluate(&state)?;
            let report = MetricReport {
                mmd: e.mmd,
                energy_distance: e.energy_distance,
                feat_cos: e.progress.feat_cos,
                feat_cos_projected: e.progress.feat_cos_projected,
                attn_ce: e.progress.attn_ce,
                n_samples: cfg.sampler.eval_samples,
            };
            fs::create_dir_all(&out)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
            write_atomic(&out.join("eval.json"), format!("{json}\n").as_bytes())?;
            println!("{json}");
            Ok(())
        }
        Verb::Diag { ckpt, out, t, loss, probe_size, teacher } => {
            let (state, mut cfg) = load_checkpoint(&ckpt)?;
            let spec = &mut cfg.schedule.probe;
            if let Some(t) = t {
                spec.t_grid = parse_list(&t)?;
            }
            if let Some(l) = loss {
                spec.loss = ProbeLoss::parse(&l)?;
            }
            if let Some(p) = probe_size {
                spec.size = p;
            }
            cfg.validate()?;
            let teacher = run_teacher(&cfg, teacher.as_deref())?;
            let trainer = Trainer::new(cfg.clone(), &teacher)?;
            let rhos = probe_conflict(&state.model(&cfg), &state.proj, &trainer.data.probe, &cfg.align)?;
            let log = RunLog {
                metrics: Vec::new(),
                diag: rhos
                    .iter()
                    .map(|&(t, rho)| DiagRow { step: state.step, t, rho, loss_kind: cfg.schedule.probe.loss.as_str().into() })
                    .collect(),
            };
            fs::create_dir_all(&out)?;
            write_atomic(&out.join("diag.csv"), log.diag_csv().as_bytes())?;
            print!("{}", log.diag_csv());
            debug_assert!(log.diag_csv().starts_with(DIAG_HEADER));
            Ok(())
        }
        Verb::Plot { .. } => unreachable!("handled before dispatch"),
    }
}

fn parse_list(s: &str) -> Result<Vec<f32>> {
    s.split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|_| Error::Config(format!("cannot parse {p:?} as a number"))))
        .collect()
}

/// Teacher for inspecting a run: an explicit path, else the configured one.
fn run_teacher(cfg: &RunConfig, explicit: Option<&Path>) -> Result<Teacher> {
    match explicit.or(cfg.teacher.checkpoint.as_deref()) {
        Some(p) => Teacher::load(p),
        None => Err(Error::Config("no teacher checkpoint: pass --teacher or set [teacher] checkpoint".into())),
    }
}

fn teacher_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let rec = pretrain_for(cfg)?;
    rec.teacher.save(&out.join("teacher.hste"))?;
    let info = serde_json::json!({ "holdout_accuracy": rec.holdout_accuracy, "checksum": rec.teacher.checksum() });
    write_atomic(&out.join("teacher.json"), format!("{info}\n").as_bytes())?;
    println!("teacher holdout accuracy {:.4}, checksum {}", rec.holdout_accuracy, rec.teacher.checksum());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let lock = out.join("run.lock");
    let hash = cfg.hash();
    if lock.exists() {
        let held = fs::read_to_string(&lock)?;
        if held.trim() != hash {
            return Err(Error::Config(format!(
                "{} belongs to a different configuration (lock {}, config {hash})",
                out.display(),
                held.trim()
            )));
        }
    } else {
        write_atomic(&lock, format!("{hash}\n").as_bytes())?;
    }
    write_atomic(&out.join("config.cfg"), cfg.to_text().as_bytes())?;
    let teacher = match &cfg.teacher.checkpoint {
        Some(p) => Teacher::load(p)?,
        None => {
            let path = out.join("teacher.hste");
            if path.exists() {
                Teacher::load(&path)?
            } else {
                let rec = pretrain_for(cfg)?;
                rec.teacher.save(&path)?;
                rec.teacher
            }
        }
    };
    let trainer = Trainer::new(cfg.clone(), &teacher)?;
    let (state, log) = run_dir(&trainer, out)?;
    if let Some(last) = log.metrics.iter().rev().find(|r| r.mmd.is_some()) {
        println!("step {} mmd {}", last.step, last.mmd.unwrap_or(f64::NAN));
    }
    println!("finished {} steps in {}", state.step, out.display());
    Ok(())
}

/// Images `[n, H, W, 1]` in `[-1, 1]` tiled into one 8-bit greyscale PGM.
fn pgm_grid(images: &Array) -> Vec<u8> {
    let s = images.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; gw * gh];
    for i in 0..n {
        let (r0, c0) = (1 + (i / cols) * (h + 1), 1 + (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = images.data()[(i * h + y) * w + x];
                px[(r0 + y) * gw + c0 + x] = (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend(px);
    out
}

fn plot(runs: &[PathBuf]) -> i32 {
    let available = Command::new("python3")
        .args(["-c", &format!("import {PLOT_MODULE}")])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false);
    if !available {
        eprintln!("plot component not installed");
        return EXIT_PLOT_MISSING;
    }
    match Command::new("python3").arg("-m").arg(PLOT_MODULE).args(runs).status() {
        Ok(s) if s.success() => EXIT_OK,
        Ok(s) => s.code().unwrap_or(EXIT_FAILURE),
        Err(e) => {
            report(&Error::Io(e));
            EXIT_FAILURE
        }
    }
}
