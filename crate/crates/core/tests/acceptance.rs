//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1–5, 11 and 12 are exact properties and fail the process when
//! violated. Criteria 6–10 compare multi-seed desk runs read from the lab
//! cache (`HOLALIGN_LAB`, default `target/desk-lab`); precompute them with
//! `cargo run --release --example reproduce`, or set
//! `HOLALIGN_TRAIN_DESK=1` to train missing runs here. Their outcome fails
//! the process only when `HOLALIGN_STRICT=1`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use holalign::align::{
    atta_loss, hybrid_loss, leading_heads, mean_row_entropy, repa_from_features, repa_loss, AlignConfig, Projector,
};
use holalign::experiments::{DeskSuite, Lab};
use holalign::interpolant::{
    cfg_velocity, diffusion_loss, sample_ode, sample_sde, Diffusion, DiffusionBatch, GaussianField, SamplerConfig,
    SamplerKind, VelocityField,
};
use holalign::ndgrad::{finite_diff_check, Array, ParamSet, Rng, Tape, Var, FD_STEP};
use holalign::schedule::{probe_conflict, ConflictProbe, ProbeLoss};
use holalign::student::{ActivationTrace, Student, StudentConfig};
use holalign::teacher::{Teacher, TeacherConfig, TeacherOutputs};
use holalign::trainer::{train_step, RunLog, RunState, Trainer};

type Tape64 = Tape<f64>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn weighted_op(
    op: impl Fn(&mut Tape64, Var) -> holalign::Result<Var> + Clone,
    base: &Array<f64>,
    seed: u64,
) -> impl Fn(&mut Tape64, Var) -> holalign::Result<Var> {
    let y0 = {
        let mut t = Tape64::new();
        let v = t.constant(base.clone());
        let y = op(&mut t, v).unwrap();
        t.value(y).clone()
    };
    let n = y0.len();
    let y0 = y0.reshape(&[n]).unwrap();
    let w = Rng::new(seed ^ 0x5eed).normal_array(&[n]).cast::<f64>();
    move |t: &mut Tape64, v: Var| {
        let y = op(t, v)?;
        let flat = t.reshape(y, &[n])?;
        let off = t.constant(y0.clone());
        let c = t.sub(flat, off)?;
        let wv = t.constant(w.clone());
        let p = t.mul(c, wv)?;
        t.sum(p)
    }
}

fn op_error(shape: &[usize], op: impl Fn(&mut Tape64, Var) -> holalign::Result<Var> + Clone) -> f64 {
    (0..20u64)
        .map(|seed| {
            let x = Rng::new(seed).normal_array(shape).cast::<f64>();
            finite_diff_check(weighted_op(op.clone(), &x, seed), &x, FD_STEP).unwrap()
        })
        .fold(0.0, f64::max)
}

fn constant(t: &mut Tape64, seed: u64, shape: &[usize]) -> Var {
    t.constant(Rng::new(seed).normal_array(shape).cast::<f64>())
}

fn per_op_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("silu", op_error(&[3, 4], |t, v| t.silu(v))),
        ("softmax", op_error(&[2, 5], |t, v| t.softmax_lastdim(v))),
        ("layer_norm", op_error(&[3, 6], |t, v| t.layer_norm(v, 1e-5))),
        ("scale", op_error(&[5], |t, v| t.scale(v, -1.5))),
        ("square", op_error(&[4], |t, v| t.square(v))),
        ("transpose", op_error(&[2, 3, 4], |t, v| t.transpose_last2(v))),
        ("permute", op_error(&[2, 3, 2, 2], |t, v| t.permute(v, &[0, 2, 1, 3]))),
        ("narrow", op_error(&[2, 4, 3], |t, v| t.narrow(v, 1, 1, 2))),
        ("mean_axis", op_error(&[2, 3, 4], |t, v| t.mean_axis(v, 1))),
        ("broadcast", op_error(&[2, 3], |t, v| t.broadcast_axis1(v, 4))),
        ("gather", op_error(&[4, 3], |t, v| t.gather(v, &[0, 3, 3, 1, 2]))),
        ("mean", op_error(&[7], |t, v| t.mean(v))),
        ("add", op_error(&[3, 4], |t, v| {
            let o = constant(t, 90, &[3, 4]);
            t.add(v, o)
        })),
        ("sub", op_error(&[3, 4], |t, v| {
            let o = constant(t, 91, &[3, 4]);
            t.sub(o, v)
        })),
        ("mul", op_error(&[3, 4], |t, v| {
            let o = constant(t, 99, &[3, 4]);
            t.mul(v, o)
        })),
        ("cosine", op_error(&[3, 4], |t, v| {
            let o = constant(t, 99, &[3, 4]);
            t.cosine_sim_lastdim(v, o, 1e-8)
        })),
        ("matmul", op_error(&[2, 3, 4], |t, v| {
            let w = constant(t, 98, &[4, 5]);
            t.matmul(v, w)
        })),
        ("matmul_t", op_error(&[2, 6, 4], |t, v| {
            let a = constant(t, 96, &[2, 3, 4]);
            t.matmul_t(a, v, false, true)
        })),
        ("linear", op_error(&[4, 5], |t, v| {
            let x = constant(t, 94, &[2, 3, 4]);
            let b = constant(t, 93, &[5]);
            t.linear(x, v, Some(b))
        })),
        ("cross_entropy", op_error(&[3, 4], |t, v| t.cross_entropy_logits(v, &[0, 3, 1]))),
    ]
}

/// Largest relative error of the full objective (denoising plus both
/// alignment terms) over every student and projector parameter.
fn hybrid_error(seed: u64) -> f64 {
    let s_cfg = StudentConfig { depth: 2, width: 8, heads: 2, patch: 2, image_size: 4, classes: 2, time_dim: 4, ..StudentConfig::desk() };
    let t_cfg = TeacherConfig { depth: 2, width: 8, heads: 2, patch: 2, image_size: 4, classes: 2, mlp_ratio: 2 };
    let mut rng = Rng::new(1000 + seed);
    let mut student = Student::init(s_cfg, &mut rng).unwrap();
    // Leave the zero-initialised gates so every path carries gradient.
    for (_, a) in student.params.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.normal());
    }
    let proj = Projector::init(8, 8, &mut rng).unwrap().params;
    let mut teacher = Teacher::init(t_cfg, &mut rng).unwrap();
    teacher.freeze();
    let x0 = rng.uniform_array(&[2, 4, 4, 1], -1.0, 1.0);
    let targets = teacher.encode(&x0).unwrap();
    let batch = DiffusionBatch::draw(x0, vec![0, 2], &mut rng).unwrap();
    let cfg = AlignConfig { lambda_repa: 0.5, lambda_atta: 0.5, feature_depth: 1, pairs: vec![(0, 1), (1, 0)], aligned_heads: 2 };
    let objective = |tape: &mut Tape64, student_p: &ParamSet, which: Option<(bool, &str, Var)>| -> holalign::Result<Var> {
        let mut sp = student_p.bind_frozen(tape);
        let mut pp = proj.bind_frozen(tape);
        if let Some((is_student, name, leaf)) = which {
            if is_student {
                sp = sp.with(name, leaf)?;
            } else {
                pp = pp.with(name, leaf)?;
            }
        }
        let x = tape.constant(batch.x_t()?.cast());
        let (v, trace) = Student::forward(&student.cfg, tape, &sp, x, &batch.t, &batch.labels)?;
        let diff = diffusion_loss(tape, v, &batch)?;
        let align = hybrid_loss(tape, &trace, &targets, &pp, &cfg)?.total;
        tape.add(diff, align)
    };
    let mut worst = 0.0f64;
    for (is_student, set) in [(true, &student.params), (false, &proj)] {
        for (name, value) in set.iter() {
            let x = value.cast::<f64>();
            let f = |tape: &mut Tape64, leaf: Var| objective(tape, &student.params, Some((is_student, name, leaf)));
            worst = worst.max(finite_diff_check(f, &x, FD_STEP).unwrap());
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let ops = per_op_errors();
    let (worst_op, op_err) = ops.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let hybrid = (0..20).map(hybrid_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        op_err <= 1e-3 && hybrid <= 1e-2 && secs < 60.0,
        format!("{} ops, worst {worst_op} {op_err:.2e} (≤1e-3); hybrid loss on a 4-token model {hybrid:.2e} (≤1e-2); 20 seeds; {secs:.1}s", ops.len()),
    )
}

// ---------------------------------------------------------------- 2

fn repa_value(z: Array, y: &Array) -> f64 {
    let mut tape: Tape = Tape::new();
    let zv = tape.leaf(z);
    let l = repa_from_features(&mut tape, zv, y).unwrap();
    tape.value(l).item() as f64
}

fn criterion_2() -> Outcome {
    let mut rng = Rng::new(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let z = rng.normal_array(&[2, 5, 6]);
        let y = rng.normal_array(&[2, 5, 6]);
        let v = repa_value(z, &y);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let y = rng.normal_array(&[2, 5, 6]);
    let equal = repa_value(y.clone(), &y);
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let hand = repa_value(Array::new(&[1, 2, 2], vec![s, s, 1.0, 0.0]).unwrap(), &Array::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    outcome(
        lo >= -1.0 && hi <= 1.0 && (equal + 1.0).abs() <= 1e-6 && (hand + 0.35355).abs() <= 1e-5,
        format!("range over 1000 instances [{lo:.4}, {hi:.4}]; equal features {equal:.7}; hand example {hand:.6}"),
    )
}

// ---------------------------------------------------------------- 3

fn stochastic_rows(rng: &mut Rng, shape: &[usize]) -> Array {
    let mut a = rng.normal_array(shape).map(|v| (2.0 * v).exp());
    let n = *shape.last().unwrap();
    for row in a.data_mut().chunks_exact_mut(n) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

fn atta_value(student_maps: Vec<Array>, teacher: &TeacherOutputs, cfg: &AlignConfig) -> f64 {
    let mut tape: Tape = Tape::new();
    let trace = ActivationTrace { hidden: vec![], attn: student_maps.into_iter().map(|a| tape.leaf(a)).collect() };
    let l = atta_loss(&mut tape, &trace, teacher, cfg).unwrap();
    tape.value(l).item() as f64
}

fn criterion_3() -> Outcome {
    let cfg = AlignConfig { lambda_repa: 0.5, lambda_atta: 0.5, feature_depth: 0, pairs: vec![(0, 0)], aligned_heads: 2 };
    let mut rng = Rng::new(3);
    let (mut min_gap, mut worst_eq) = (f64::INFINITY, 0.0f64);
    for _ in 0..50 {
        let t = stochastic_rows(&mut rng, &[2, 3, 5, 5]);
        let teacher = TeacherOutputs { y: Array::zeros(&[2, 5, 1]), attn: vec![t.clone()] };
        let floor = mean_row_entropy(&leading_heads(&t, 2).unwrap());
        let other = atta_value(vec![stochastic_rows(&mut rng, &[2, 3, 5, 5])], &teacher, &cfg);
        min_gap = min_gap.min(other - floor);
        worst_eq = worst_eq.max((atta_value(vec![t], &teacher, &cfg) - floor).abs());
    }
    let one = AlignConfig { aligned_heads: 1, ..cfg };
    let teacher = TeacherOutputs { y: Array::zeros(&[1, 1, 1]), attn: vec![Array::new(&[1, 1, 1, 2], vec![0.8, 0.2]).unwrap()] };
    let hand = atta_value(vec![Array::new(&[1, 1, 1, 2], vec![0.6, 0.4]).unwrap()], &teacher, &one);
    outcome(
        min_gap >= -1e-6 && worst_eq <= 1e-6 && (hand - 0.59192).abs() <= 1e-4,
        format!("min gap above teacher entropy {min_gap:.3e} over 50 pairs; exact match off by {worst_eq:.1e}; hand example {hand:.5}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cfg = common::tiny_config();
    let tau = cfg.schedule.tau.unwrap();
    let trainer = Trainer::new(cfg.clone(), &common::tiny_teacher(&cfg)).unwrap();
    let mut vanilla = cfg.clone();
    (vanilla.align.lambda_repa, vanilla.align.lambda_atta) = (0.0, 0.0);
    let mut state = RunState::init(&cfg).unwrap();
    for n in 0..tau {
        train_step(&mut state, &cfg, &trainer.batch(n).unwrap()).unwrap();
    }
    let mut before = state.clone();
    before.step = tau - 1;
    let last_aligned = train_step(&mut before, &cfg, &trainer.batch(tau - 1).unwrap()).unwrap().aligned;
    let mut exact = true;
    let (mut a, mut b) = (state.clone(), state.clone());
    let mut boundary_inactive = true;
    for n in tau..tau + 3 {
        let batch = trainer.batch(n).unwrap();
        let ma = train_step(&mut a, &cfg, &batch).unwrap();
        let mb = train_step(&mut b, &vanilla, &batch).unwrap();
        if n == tau {
            boundary_inactive = !ma.aligned && ma.repa.is_none() && ma.atta.is_none();
        }
        exact &= ma.loss.to_bits() == mb.loss.to_bits()
            && a.student.bit_eq(&b.student)
            && a.proj.bit_eq(&b.proj)
            && a.opt_student == b.opt_student
            && a.rng == b.rng;
    }
    outcome(
        exact && boundary_inactive && last_aligned,
        format!("τ={tau}: update τ-1 aligned={last_aligned}, update τ aligned={}; 3 post-τ updates bit-identical to pure denoising: {exact}", !boundary_inactive),
    )
}

// ---------------------------------------------------------------- 5

struct ProbeSetup {
    student: Student,
    proj: ParamSet,
    probe: ConflictProbe,
    cfg: AlignConfig,
}

fn probe_setup(seed: u64) -> ProbeSetup {
    let scfg = StudentConfig { depth: 3, width: 16, heads: 2, patch: 4, image_size: 8, classes: 3, time_dim: 8, ..StudentConfig::desk() };
    let tcfg = TeacherConfig { depth: 3, width: 12, heads: 2, patch: 4, image_size: 8, classes: 3, mlp_ratio: 2 };
    let mut rng = Rng::new(500 + seed);
    let mut student = Student::init(scfg, &mut rng).unwrap();
    for (_, a) in student.params.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    }
    let proj = Projector::init(16, 12, &mut rng).unwrap().params;
    let mut teacher = Teacher::init(tcfg, &mut rng).unwrap();
    teacher.freeze();
    let images = rng.uniform_array(&[4, 8, 8, 1], -1.0, 1.0);
    let outs = teacher.encode(&images).unwrap();
    let kind = [ProbeLoss::Repa, ProbeLoss::Atta, ProbeLoss::Holistic][seed as usize % 3];
    let block = seed as usize % 3;
    let cfg = AlignConfig { lambda_repa: 0.5, lambda_atta: 0.5, feature_depth: 1, pairs: vec![(0, 1), (1, 2)], aligned_heads: 2 };
    let probe = ConflictProbe::new(images, vec![0, 1, 2, 0], outs, block, vec![0.05, 0.2, 0.9], seed, kind).unwrap();
    ProbeSetup { student, proj, probe, cfg }
}

/// Flatten both gradients of the probed block and take one cosine.
fn brute_force_rho(s: &ProbeSetup, i: usize) -> f64 {
    let p = &s.probe;
    let t = p.t_grid[i];
    let b = p.labels.len();
    let grads = |align: bool| -> Vec<f64> {
        let mut tape: Tape = Tape::new();
        let sp = s.student.params.bind(&mut tape);
        let pp = s.proj.bind(&mut tape);
        let xt: Vec<f32> = p.images.data().iter().zip(p.eps[i].data()).map(|(&x, &e)| (1.0 - t) * x + t * e).collect();
        let x = tape.constant(Array::new(p.images.shape(), xt).unwrap());
        let (v, trace) = Student::forward(&s.student.cfg, &mut tape, &sp, x, &vec![t; b], &p.labels).unwrap();
        let root = if align {
            match p.loss {
                ProbeLoss::Repa => repa_loss(&mut tape, &trace, &p.teacher, &pp, &s.cfg).unwrap(),
                ProbeLoss::Atta => atta_loss(&mut tape, &trace, &p.teacher, &s.cfg).unwrap(),
                ProbeLoss::Holistic => hybrid_loss(&mut tape, &trace, &p.teacher, &pp, &s.cfg).unwrap().total,
            }
        } else {
            let target: Vec<f32> = p.images.data().iter().zip(p.eps[i].data()).map(|(&x, &e)| e - x).collect();
            let target = tape.constant(Array::new(p.images.shape(), target).unwrap());
            let d = tape.sub(v, target).unwrap();
            let d = tape.square(d).unwrap();
            tape.mean(d).unwrap()
        };
        tape.backward(root).unwrap();
        let prefix = format!("block{}.", p.block_index);
        sp.iter().filter(|(n, _)| n.starts_with(&prefix)).flat_map(|(_, v)| tape.grad(v).into_data()).map(f64::from).collect()
    };
    let (a, g) = (grads(false), grads(true));
    let dot: f64 = a.iter().zip(&g).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(&a) * norm(&g))
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let s = probe_setup(seed);
        for (i, &(_, r)) in probe_conflict(&s.student, &s.proj, &s.probe, &s.cfg).unwrap().iter().enumerate() {
            worst = worst.max((r - brute_force_rho(&s, i)).abs());
        }
    }
    // The same run with a probe after every update and with none at all.
    let mut cfg = common::tiny_config();
    cfg.train.steps = 12;
    cfg.train.eval_every = 0;
    let teacher = common::tiny_teacher(&cfg);
    let trajectory = |probe_every: u64| {
        let mut c = cfg.clone();
        c.schedule.probe_every = probe_every;
        let trainer = Trainer::new(c.clone(), &teacher).unwrap();
        let mut state = RunState::init(&c).unwrap();
        let mut log = RunLog::default();
        trainer.run(&mut state, &mut log, None).unwrap();
        (state, log)
    };
    let (probed, plog) = trajectory(1);
    let (plain, vlog) = trajectory(0);
    let same = probed.student.bit_eq(&plain.student)
        && probed.proj.bit_eq(&plain.proj)
        && probed.opt_student == plain.opt_student
        && probed.opt_proj == plain.opt_proj
        && probed.rng == plain.rng
        && plog.metrics.iter().zip(&vlog.metrics).all(|(a, b)| a.loss_diff.map(f32::to_bits) == b.loss_diff.map(f32::to_bits));
    outcome(
        worst <= 1e-6 && same && plog.diag.len() == 12 * 2 && vlog.diag.is_empty(),
        format!("max |ρ - brute force| {worst:.2e} over 10 models; {} probe rows interleaved, trajectory bit-identical: {same}", plog.diag.len()),
    )
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let scfg = StudentConfig { depth: 2, width: 16, heads: 2, patch: 4, image_size: 8, classes: 3, time_dim: 8, ..StudentConfig::desk() };
    let mut rng = Rng::new(11);
    let mut model = Student::init(scfg, &mut rng).unwrap();
    for (_, a) in model.params.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    }
    let mut sde_ode = true;
    for nfes in [1, 10, 50] {
        let ode = SamplerConfig { nfes, kind: SamplerKind::Ode, seed: 4, ..Default::default() };
        let sde = SamplerConfig { kind: SamplerKind::Sde, diffusion: Diffusion::Zero, ..ode.clone() };
        sde_ode &= sample_ode(&model, &ode, 6, 8).unwrap().bit_eq(&sample_sde(&model, &sde, 6, 8).unwrap());
    }
    let x = rng.normal_array(&[4, 8, 8, 1]);
    let labels = [0, 1, 2, 1];
    let unit = SamplerConfig { cfg_scale: 1.0, ..Default::default() };
    let guided = cfg_velocity(&model, &x, 0.6, &labels, &unit).unwrap();
    let cfg_one = guided.bit_eq(&model.velocity(&x, &[0.6; 4], &labels).unwrap());

    let field = GaussianField { mu: 0.3, sigma: 0.5 };
    let error = |nfes: usize| {
        let cfg = SamplerConfig { nfes, kind: SamplerKind::Ode, seed: 6, ..Default::default() };
        let out = sample_ode(&field, &cfg, 16, 2).unwrap();
        let start = Rng::new(cfg.seed).split("start").normal_array(&[16, 2, 2, 1]);
        out.data().iter().zip(start.data()).map(|(&o, &e)| (o - field.flow_endpoint(e)).abs() as f64).sum::<f64>()
    };
    let ratios: Vec<f64> = [16, 32, 64].iter().map(|&n| error(n) / error(2 * n)).collect();
    let halves = ratios.iter().all(|r| (1.5..=2.5).contains(r));
    outcome(
        sde_ode && cfg_one && halves,
        format!("g≡0 SDE = ODE bitwise: {sde_ode}; w=1 = conditional bitwise: {cfg_one}; error ratios on doubling nfes {ratios:.3?}"),
    )
}

// ---------------------------------------------------------------- 12

fn train_cli(config: &std::path::Path, out: &std::path::Path) {
    let args = ["holalign", "train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(holalign::cli::main_with_args(args.iter().map(|s| s.to_string())), 0, "train {}", out.display());
}

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::short_desk_config(&common::desk_teacher(dir.path()));
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, cfg.to_text()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_cli(&config, &a);
    train_cli(&config, &b);
    let read = |d: &PathBuf| std::fs::read(d.join("metrics.csv")).unwrap();
    let replay = read(&a) == read(&b);

    // Lose everything after the mid-run checkpoint, leaving a torn row.
    let mid = cfg.train.steps / 2;
    std::fs::remove_file(b.join(holalign::trainer::checkpoint_name(cfg.train.steps))).unwrap();
    let mut text = String::from_utf8(read(&b)).unwrap();
    let keep: Vec<&str> = text.lines().take(mid as usize + 3).collect();
    text = keep.join("\n") + "\n77,0.1";
    std::fs::write(b.join("metrics.csv"), text).unwrap();
    train_cli(&config, &b);
    let resumed = read(&a) == read(&b);
    let diag_same = std::fs::read(a.join("diag.csv")).unwrap() == std::fs::read(b.join("diag.csv")).unwrap();
    outcome(
        replay && resumed && diag_same,
        format!("{}-step desk run: replay identical {replay}; resumed from step {mid} identical {resumed} (diag.csv {diag_same})", cfg.train.steps),
    )
}

// ---------------------------------------------------------------- 6–10

fn lab_root() -> PathBuf {
    std::env::var_os("HOLALIGN_LAB")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/desk-lab"))
}

fn trend_criteria() -> Vec<(u32, &'static str, Outcome)> {
    let suite = DeskSuite::default();
    let lab = Lab::new(lab_root());
    let train = std::env::var("HOLALIGN_TRAIN_DESK").is_ok_and(|v| v == "1");
    let logs = if train {
        suite.collect(&lab, &mut |label, seed| eprintln!("desk run {label} seed {seed}")).map(Some)
    } else {
        suite.cached(&lab)
    };
    let names = ["early acceleration and termination benefit", "attention alignment pulls features", "feature alignment pulls attention", "low-pass teacher inputs suffice", "timestep conflict ordering"];
    let missing = |why: String| (6..=10).zip(names).map(|(id, name)| (id, name, outcome(false, why.clone()))).collect();
    match logs {
        Ok(Some(logs)) => match suite.checks(&logs) {
            Ok(checks) => checks.into_iter().map(|c| (c.id, c.name, outcome(c.pass, c.detail))).collect(),
            Err(e) => missing(format!("cannot compare desk runs: {e}")),
        },
        Ok(None) => missing(format!("desk runs not in {} (cargo run --release --example reproduce)", lab.root.display())),
        Err(e) => missing(format!("desk runs unavailable: {e}")),
    }
}

fn main() {
    // Cargo passes harness flags such as `--list`; only listing is answered.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let exact: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "gradient correctness", criterion_1),
        (2, "feature alignment bounds", criterion_2),
        (3, "attention alignment Gibbs property", criterion_3),
        (4, "termination bit-exactness", criterion_4),
        (5, "conflict probe oracle and purity", criterion_5),
        (11, "sampler sanity", criterion_11),
        (12, "determinism and persistence", criterion_12),
    ];
    let mut lines: Vec<(u32, &str, Outcome, bool)> = exact.into_iter().map(|(id, name, f)| (id, name, f(), true)).collect();
    let strict = std::env::var("HOLALIGN_STRICT").is_ok_and(|v| v == "1");
    lines.extend(trend_criteria().into_iter().map(|(id, name, o)| (id, name, o, strict)));
    lines.sort_by_key(|l| l.0);
    let mut failed = false;
    for (id, name, o, binding) in &lines {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed |= *binding && !o.pass;
    }
    if failed {
        std::process::exit(1);
    }
}
