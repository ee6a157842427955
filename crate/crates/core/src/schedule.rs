//! Stage-wise termination of the alignment terms and the gradient-conflict
//! probe that motivates it.

use crate::align::{atta_loss, hybrid_loss, repa_loss, AlignConfig};
use crate::error::{Error, Result};
use crate::interpolant::{diffusion_loss, DiffusionBatch};
use crate::ndgrad::{Array, Bound, ParamSet, Rng, Tape, Var};
use crate::student::{ActivationTrace, Student};
use crate::teacher::TeacherOutputs;

/// Which alignment gradient the probe compares against the denoising one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeLoss {
    Repa,
    Atta,
    /// The weighted sum of both terms, as trained.
    Holistic,
}

impl ProbeLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeLoss::Repa => "repa",
            ProbeLoss::Atta => "atta",
            ProbeLoss::Holistic => "holistic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "repa" => Ok(ProbeLoss::Repa),
            "atta" => Ok(ProbeLoss::Atta),
            "holistic" => Ok(ProbeLoss::Holistic),
            other => Err(Error::Config(format!("unknown probe loss {other:?}"))),
        }
    }
}

/// Default probe timesteps.
pub const DEFAULT_T_GRID: [f32; 6] = [0.02, 0.05, 0.1, 0.2, 0.5, 0.9];

/// How to build a [`ConflictProbe`]: everything except the images.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSpec {
    /// Number of probe images.
    pub size: usize,
    /// Student block whose parameters are measured; `None` means the
    /// alignment feature depth.
    pub block_index: Option<usize>,
    pub t_grid: Vec<f32>,
    pub seed: u64,
    pub loss: ProbeLoss,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { size: 64, block_index: None, t_grid: DEFAULT_T_GRID.to_vec(), seed: 0, loss: ProbeLoss::Repa }
    }
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("probe size must be positive".into()));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config(format!("probe timesteps must lie in (0, 1], got {:?}", self.t_grid)));
        }
        Ok(())
    }
}

/// When the alignment terms are dropped.
#[derive(Clone, Debug, PartialEq)]
pub enum TerminationPolicy {
    /// Active for steps `n < tau`.
    FixedIter { tau: u64 },
    /// Active until the median of the last `window` checks of ρ at the
    /// smallest probed timestep falls to `threshold` or below.
    GradAngle { window: usize, threshold: f64, probe: ProbeSpec, check_every: u64 },
}

impl TerminationPolicy {
    /// Alignment for the whole run.
    pub fn never() -> Self {
        TerminationPolicy::FixedIter { tau: u64::MAX }
    }

    pub fn grad_angle_default() -> Self {
        TerminationPolicy::GradAngle { window: 5, threshold: 0.0, probe: ProbeSpec::default(), check_every: 500 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TerminationPolicy::FixedIter { .. } => Ok(()),
            TerminationPolicy::GradAngle { window, threshold, probe, check_every } => {
                if *window == 0 || *check_every == 0 || !threshold.is_finite() {
                    return Err(Error::Config("grad-angle trigger needs window > 0, check_every > 0, finite threshold".into()));
                }
                probe.validate()
            }
        }
    }

    /// The step from which alignment is off, if it has been determined.
    /// `history` holds `(probe step, ρ at the smallest timestep)` in step order.
    pub fn switch_step(&self, history: &[(u64, f64)]) -> Option<u64> {
        match self {
            TerminationPolicy::FixedIter { tau } => Some(*tau),
            TerminationPolicy::GradAngle { window, threshold, .. } => {
                if *window == 0 {
                    return None;
                }
                history.windows(*window).find(|w| median(w.iter().map(|e| e.1)) <= *threshold).map(|w| w[w.len() - 1].0)
            }
        }
    }
}

/// Whether step `n` (the number of updates already applied) trains with the
/// alignment terms.
pub fn alignment_active(n: u64, policy: &TerminationPolicy, history: &[(u64, f64)]) -> bool {
    match policy.switch_step(history) {
        Some(s) => n < s,
        None => true,
    }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Parameters of student block `l`.
pub fn block_filter(l: usize) -> impl Fn(&str) -> bool {
    let prefix = format!("block{l}.");
    move |name: &str| name.starts_with(&prefix)
}

/// Cosine between the concatenated adjoints of the parameters passing
/// `subset`, taken in the sets' (shared) name order.
pub fn rho(grad_a: &ParamSet, grad_b: &ParamSet, subset: impl Fn(&str) -> bool) -> Result<f64> {
    let names_a: Vec<&str> = grad_a.names().filter(|n| subset(n)).collect();
    let names_b: Vec<&str> = grad_b.names().filter(|n| subset(n)).collect();
    if names_a.is_empty() {
        return Err(Error::Config("gradient subset selects no parameters".into()));
    }
    if names_a != names_b {
        return Err(Error::Contract("gradient sets cover different parameters".into()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for name in names_a {
        let (a, b) = (grad_a.get(name).expect("listed"), grad_b.get(name).expect("listed"));
        if a.shape() != b.shape() {
            return Err(Error::Contract(format!("gradient {name} shapes differ")));
        }
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    Ok((dot / (na.sqrt() * nb.sqrt()).max(1e-12)).clamp(-1.0, 1.0))
}

/// Fixed probe images, their per-timestep noise and teacher targets.
#[derive(Clone, Debug)]
pub struct ConflictProbe {
    pub images: Array,
    pub labels: Vec<usize>,
    pub teacher: TeacherOutputs,
    pub block_index: usize,
    pub t_grid: Vec<f32>,
    /// One noise draw per timestep, fixed by the seed.
    pub eps: Vec<Array>,
    pub seed: u64,
    pub loss: ProbeLoss,
}

impl ConflictProbe {
    pub fn new(
        images: Array,
        labels: Vec<usize>,
        teacher: TeacherOutputs,
        block_index: usize,
        t_grid: Vec<f32>,
        seed: u64,
        loss: ProbeLoss,
    ) -> Result<Self> {
        if images.shape()[0] != labels.len() || teacher.batch() != labels.len() {
            return Err(Error::Shape("probe images, labels and teacher outputs disagree in count".into()));
        }
        let root = Rng::new(seed).split("probe-noise");
        let eps = (0..t_grid.len()).map(|i| root.split_index("t", i as u64).normal_array(images.shape())).collect();
        Ok(Self { images, labels, teacher, block_index, t_grid, eps, seed, loss })
    }
}

/// Inputs available to a custom alignment loss inside the probe.
pub struct ProbeContext<'a> {
    pub trace: &'a ActivationTrace,
    pub proj: &'a Bound,
    pub teacher: &'a TeacherOutputs,
    /// The denoising loss on the same forward pass.
    pub diff: Var,
}

fn probe_grads(
    student: &Student,
    proj: &ParamSet,
    probe: &ConflictProbe,
    i: usize,
    loss: &dyn Fn(&mut Tape, &ProbeContext) -> Result<Var>,
) -> Result<ParamSet> {
    let t = probe.t_grid[i];
    let batch = DiffusionBatch::at_time(probe.images.clone(), probe.eps[i].clone(), t, probe.labels.clone())?;
    let mut tape: Tape = Tape::new();
    let sp = student.params.bind(&mut tape);
    let pp = proj.bind(&mut tape);
    let x = tape.constant(batch.x_t()?);
    let (v, trace) = Student::forward(&student.cfg, &mut tape, &sp, x, &batch.t, &batch.labels)?;
    let diff = diffusion_loss(&mut tape, v, &batch)?;
    let ctx = ProbeContext { trace: &trace, proj: &pp, teacher: &probe.teacher, diff };
    let root = loss(&mut tape, &ctx)?;
    tape.backward(root).map_err(|e| Error::Numeric(format!("probe at t={t}: {e}")))?;
    let g = sp.grads(&tape);
    if !g.is_finite() {
        return Err(Error::Numeric(format!("non-finite probe gradient at t={t}")));
    }
    Ok(g)
}

/// ρ_t between the denoising gradient and `align`'s gradient over the probe
/// block's parameters, one entry per probe timestep. Parameters, optimizer
/// state and training randomness are untouched.
pub fn probe_conflict_with(
    student: &Student,
    proj: &ParamSet,
    probe: &ConflictProbe,
    align: &dyn Fn(&mut Tape, &ProbeContext) -> Result<Var>,
) -> Result<Vec<(f32, f64)>> {
    if probe.block_index >= student.cfg.depth {
        return Err(Error::Config(format!("probe block {} outside a {}-block student", probe.block_index, student.cfg.depth)));
    }
    let keep = block_filter(probe.block_index);
    (0..probe.t_grid.len())
        .map(|i| {
            let g_diff = probe_grads(student, proj, probe, i, &|_, ctx| Ok(ctx.diff))?;
            let g_align = probe_grads(student, proj, probe, i, align)?;
            Ok((probe.t_grid[i], rho(&g_diff, &g_align, &keep)?))
        })
        .collect()
}

/// [`probe_conflict_with`] for the probe's configured alignment loss.
/// A holistic probe of a run without alignment weights measures the
/// default-weighted hybrid loss, so unaligned runs still report ρ.
pub fn probe_conflict(student: &Student, proj: &ParamSet, probe: &ConflictProbe, cfg: &AlignConfig) -> Result<Vec<(f32, f64)>> {
    let kind = probe.loss;
    let mut cfg = cfg.clone();
    if cfg.lambda_repa == 0.0 && cfg.lambda_atta == 0.0 {
        (cfg.lambda_repa, cfg.lambda_atta) = (crate::align::LAMBDA_REPA, crate::align::LAMBDA_ATTA);
    }
    let cfg = &cfg;
    probe_conflict_with(student, proj, probe, &move |tape, ctx| match kind {
        ProbeLoss::Repa => repa_loss(tape, ctx.trace, ctx.teacher, ctx.proj, cfg),
        ProbeLoss::Atta => atta_loss(tape, ctx.trace, ctx.teacher, cfg),
        ProbeLoss::Holistic => Ok(hybrid_loss(tape, ctx.trace, ctx.teacher, ctx.proj, cfg)?.total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{default_pairing, Preset, Projector};
    use crate::student::StudentConfig;
    use crate::teacher::{Teacher, TeacherConfig};
    use proptest::prelude::{prop_assert, proptest};

    fn set(pairs: &[(&str, Vec<f32>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, v) in pairs {
            p.insert(*n, Array::new(&[v.len()], v.clone()).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn fixed_iteration_boundary() {
        let p = TerminationPolicy::FixedIter { tau: 5 };
        assert!(alignment_active(4, &p, &[]));
        assert!(!alignment_active(5, &p, &[]));
        let zero = TerminationPolicy::FixedIter { tau: 0 };
        assert!((0..100).all(|n| !alignment_active(n, &zero, &[])));
    }

    #[test]
    fn grad_angle_trigger() {
        let p = TerminationPolicy::grad_angle_default();
        let positive: Vec<(u64, f64)> = (1..=20).map(|i| (i * 500, 1.0)).collect();
        assert!(alignment_active(1_000_000, &p, &positive));
        let mut h: Vec<(u64, f64)> = (1..=4).map(|i| (i * 500, 0.3)).collect();
        h.extend((5..=9).map(|i| (i * 500, -0.1)));
        // Windows: [.3 .3 .3 .3 -.1] median .3; [.3 .3 .3 -.1 -.1] .3; [.3 .3 -.1 -.1 -.1] -.1 at step 3500.
        assert_eq!(p.switch_step(&h), Some(3500));
        assert!(alignment_active(3499, &p, &h));
        assert!(!alignment_active(3500, &p, &h));
    }

    #[test]
    fn rho_examples() {
        let a = set(&[("block0.w", vec![1.0, 2.0]), ("block0.b", vec![-3.0])]);
        let neg = set(&[("block0.w", vec![-1.0, -2.0]), ("block0.b", vec![3.0])]);
        assert!((rho(&a, &a, |_| true).unwrap() - 1.0).abs() < 1e-12);
        assert!((rho(&a, &neg, |_| true).unwrap() + 1.0).abs() < 1e-12);
        let x = set(&[("p", vec![1.0]), ("q", vec![0.0])]);
        let y = set(&[("p", vec![0.0]), ("q", vec![1.0])]);
        assert_eq!(rho(&x, &y, |_| true).unwrap(), 0.0);
        assert!(matches!(rho(&a, &a, |n| n.starts_with("zzz")), Err(Error::Config(_))));
        let zero = set(&[("block0.w", vec![0.0, 0.0]), ("block0.b", vec![0.0])]);
        assert_eq!(rho(&a, &zero, |_| true).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn alignment_active_is_monotone(tau in 0u64..50, rhos in proptest::collection::vec(-1.0f64..1.0, 0..30)) {
            let history: Vec<(u64, f64)> = rhos.iter().enumerate().map(|(i, &r)| ((i as u64 + 1) * 3, r)).collect();
            for policy in [TerminationPolicy::FixedIter { tau }, TerminationPolicy::grad_angle_default()] {
                let mut was = true;
                for n in 0..120 {
                    let now = alignment_active(n, &policy, &history);
                    prop_assert!(was || !now);
                    was = now;
                }
            }
        }
    }

    struct Setup {
        student: Student,
        proj: ParamSet,
        probe: ConflictProbe,
        cfg: AlignConfig,
    }

    fn setup(seed: u64) -> Setup {
        let scfg = StudentConfig { depth: 2, width: 16, heads: 2, patch: 4, image_size: 8, classes: 3, time_dim: 8, ..StudentConfig::desk() };
        let tcfg = TeacherConfig { depth: 2, width: 12, heads: 2, patch: 4, image_size: 8, classes: 3, mlp_ratio: 2 };
        let mut rng = Rng::new(seed);
        let mut student = Student::init(scfg.clone(), &mut rng).unwrap();
        // Move the zero-initialised layers so every block receives gradient.
        for (_, a) in student.params.iter_mut() {
            for v in a.data_mut() {
                *v += 0.05 * rng.normal();
            }
        }
        let proj = Projector::init(scfg.width, tcfg.width, &mut rng).unwrap().params;
        let mut teacher = Teacher::init(tcfg.clone(), &mut rng).unwrap();
        teacher.freeze();
        let images = rng.normal_array(&[3, 8, 8, 1]);
        let outs = teacher.encode(&images).unwrap();
        let cfg = AlignConfig { feature_depth: 1, pairs: vec![(0, 1), (1, 1)], aligned_heads: 2, lambda_repa: 0.5, lambda_atta: 0.5 };
        cfg.validate(&scfg, &tcfg).unwrap();
        let probe = ConflictProbe::new(images, vec![0, 1, 2], outs, 1, vec![0.05, 0.5], seed, ProbeLoss::Holistic).unwrap();
        Setup { student, proj, probe, cfg }
    }

    #[test]
    fn self_similarity_and_opposition() {
        let s = setup(1);
        let same = probe_conflict_with(&s.student, &s.proj, &s.probe, &|_, ctx| Ok(ctx.diff)).unwrap();
        let opp = probe_conflict_with(&s.student, &s.proj, &s.probe, &|tape, ctx| tape.scale(ctx.diff, -1.0)).unwrap();
        assert!(same.iter().all(|&(_, r)| (r - 1.0).abs() < 1e-9));
        assert!(opp.iter().all(|&(_, r)| (r + 1.0).abs() < 1e-9));
    }

    #[test]
    fn matches_flatten_and_dot_oracle() {
        for seed in 0..3 {
            let s = setup(seed);
            for kind in [ProbeLoss::Repa, ProbeLoss::Atta, ProbeLoss::Holistic] {
                let probe = ConflictProbe { loss: kind, ..s.probe.clone() };
                let got = probe_conflict(&s.student, &s.proj, &probe, &s.cfg).unwrap();
                for (i, &(t, r)) in got.iter().enumerate() {
                    let oracle = oracle(&s, &probe, i);
                    assert!((r - oracle).abs() <= 1e-6, "seed {seed} {kind:?} t={t}: {r} vs {oracle}");
                }
            }
        }
    }

    /// Independent recomputation: fresh tapes, raw adjoint buffers, one dot.
    fn oracle(s: &Setup, probe: &ConflictProbe, i: usize) -> f64 {
        let t = probe.t_grid[i];
        let b = probe.labels.len();
        let flat = |which: u8| -> Vec<f64> {
            let mut tape: Tape = Tape::new();
            let sp = s.student.params.bind(&mut tape);
            let pp = s.proj.bind(&mut tape);
            let xt: Vec<f32> = probe.images.data().iter().zip(probe.eps[i].data()).map(|(&x, &e)| (1.0 - t) * x + t * e).collect();
            let x = tape.constant(Array::new(probe.images.shape(), xt).unwrap());
            let (v, trace) = Student::forward(&s.student.cfg, &mut tape, &sp, x, &vec![t; b], &probe.labels).unwrap();
            let root = if which == 0 {
                let target: Vec<f32> = probe.images.data().iter().zip(probe.eps[i].data()).map(|(&x, &e)| e - x).collect();
                let target = tape.constant(Array::new(probe.images.shape(), target).unwrap());
                let d = tape.sub(v, target).unwrap();
                let d = tape.square(d).unwrap();
                tape.mean(d).unwrap()
            } else {
                match probe.loss {
                    ProbeLoss::Repa => repa_loss(&mut tape, &trace, &probe.teacher, &pp, &s.cfg).unwrap(),
                    ProbeLoss::Atta => atta_loss(&mut tape, &trace, &probe.teacher, &s.cfg).unwrap(),
                    ProbeLoss::Holistic => hybrid_loss(&mut tape, &trace, &probe.teacher, &pp, &s.cfg).unwrap().total,
                }
            };
            tape.backward(root).unwrap();
            let prefix = format!("block{}.", probe.block_index);
            sp.iter().filter(|(n, _)| n.starts_with(&prefix)).flat_map(|(_, v)| tape.grad(v).into_data()).map(|g| g as f64).collect()
        };
        let (a, b) = (flat(0), flat(1));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn probe_does_not_touch_parameters() {
        let s = setup(4);
        let before = (s.student.params.clone(), s.proj.clone());
        probe_conflict(&s.student, &s.proj, &s.probe, &s.cfg).unwrap();
        assert!(s.student.params.bit_eq(&before.0) && s.proj.bit_eq(&before.1));
    }

    #[test]
    fn same_seed_same_probe_noise() {
        let s = setup(5);
        let again = ConflictProbe::new(s.probe.images.clone(), s.probe.labels.clone(), s.probe.teacher.clone(), 1, vec![0.05, 0.5], 5, ProbeLoss::Repa).unwrap();
        assert!(s.probe.eps.iter().zip(&again.eps).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn desk_pairing_validates_probe_block() {
        let sc = StudentConfig::desk();
        let tc = TeacherConfig::desk();
        let cfg = default_pairing(&sc, &tc, Preset::Desk).unwrap();
        assert!(cfg.feature_depth < sc.depth);
        assert!(block_filter(cfg.feature_depth)("block2.attn.q.w"));
        assert!(!block_filter(1)("block12.attn.q.w"));
    }
}
