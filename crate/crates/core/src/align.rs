//! Feature alignment (projected token cosine), attention alignment (token-wise
//! cross-entropy against teacher maps) and their weighted combination.

use crate::error::{Error, Result};
use crate::ndgrad::{Array, Bound, ParamSet, Rng, Scalar, Tape, Var};
use crate::nn;
use crate::student::{ActivationTrace, StudentConfig};
use crate::teacher::{TeacherConfig, TeacherOutputs};

/// Denominator guard of the token cosine.
pub const COSINE_EPS: f64 = 1e-8;
/// Floor applied to student probabilities inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Three-layer SiLU MLP `d -> 2d -> 2d -> d_T` mapping student hidden
/// states into the teacher's embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub params: ParamSet,
}

impl Projector {
    pub fn init(d: usize, d_teacher: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = ParamSet::new();
        nn::init_linear(&mut p, rng, "proj.fc1", d, 2 * d)?;
        nn::init_linear(&mut p, rng, "proj.fc2", 2 * d, 2 * d)?;
        nn::init_linear(&mut p, rng, "proj.fc3", 2 * d, d_teacher)?;
        Ok(Self { params: p })
    }

    pub fn forward<T: Scalar>(tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<Var> {
        let z = nn::linear(tape, p, "proj.fc1", h)?;
        let z = tape.silu(z)?;
        let z = nn::linear(tape, p, "proj.fc2", z)?;
        let z = tape.silu(z)?;
        nn::linear(tape, p, "proj.fc3", z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub lambda_repa: f32,
    pub lambda_atta: f32,
    /// Student block whose output feeds the projector.
    pub feature_depth: usize,
    /// `(student block, teacher block)` pairs for attention alignment.
    pub pairs: Vec<(usize, usize)>,
    /// Heads `0..aligned_heads` are matched one-to-one.
    pub aligned_heads: usize,
}

/// Named layer/head selections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    PaperXl,
    PaperB,
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper-XL" => Ok(Preset::PaperXl),
            "paper-B" => Ok(Preset::PaperB),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown alignment preset {other:?}"))),
        }
    }
}

/// Default loss weights.
pub const LAMBDA_REPA: f32 = 0.5;
pub const LAMBDA_ATTA: f32 = 0.5;

/// Layer pairs, feature depth and head count for `preset`, range-checked
/// against the given student and teacher.
pub fn default_pairing(student: &StudentConfig, teacher: &TeacherConfig, preset: Preset) -> Result<AlignConfig> {
    let (feature_depth, pairs, aligned_heads) = match preset {
        Preset::PaperXl => (8, vec![(4, 8), (5, 9), (6, 10), (7, 11)], 12),
        Preset::PaperB => (5, vec![(2, 7), (3, 9), (4, 11)], 12),
        Preset::Desk => (2, vec![(1, 4), (2, 5)], student.heads.min(teacher.heads)),
    };
    let cfg = AlignConfig { lambda_repa: LAMBDA_REPA, lambda_atta: LAMBDA_ATTA, feature_depth, pairs, aligned_heads };
    cfg.validate(student, teacher)?;
    Ok(cfg)
}

impl AlignConfig {
    pub fn validate(&self, student: &StudentConfig, teacher: &TeacherConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_repa >= 0.0) || !(self.lambda_atta >= 0.0) {
            return fail(format!("loss weights must be >= 0, got {} and {}", self.lambda_repa, self.lambda_atta));
        }
        if self.feature_depth >= student.depth {
            return fail(format!("feature depth {} is outside a {}-block student", self.feature_depth, student.depth));
        }
        for &(s, t) in &self.pairs {
            if s >= student.depth || t >= teacher.depth {
                return fail(format!(
                    "pair ({s}, {t}) is outside a {}-block student / {}-block teacher",
                    student.depth, teacher.depth
                ));
            }
        }
        if self.aligned_heads == 0 || self.aligned_heads > student.heads.min(teacher.heads) {
            return fail(format!(
                "aligned heads {} must be in 1..={}",
                self.aligned_heads,
                student.heads.min(teacher.heads)
            ));
        }
        if student.tokens() != teacher.tokens() {
            return fail(format!("student has {} tokens but teacher has {}", student.tokens(), teacher.tokens()));
        }
        Ok(())
    }
}

/// `-mean_n cos(y_n, z_n)` for projected features `z[.., d_T]` against
/// teacher embeddings `y` of the same shape.
pub fn repa_from_features<T: Scalar>(tape: &mut Tape<T>, z: Var, y: &Array) -> Result<Var> {
    if tape.shape(z) != y.shape() {
        return Err(Error::Shape(format!("projected features {:?} vs teacher embeddings {:?}", tape.shape(z), y.shape())));
    }
    let yv = tape.constant(y.cast());
    let cos = tape.cosine_sim_lastdim(z, yv, T::lit(COSINE_EPS))?;
    let m = tape.mean(cos)?;
    tape.scale(m, -T::one())
}

/// Feature alignment of block `feature_depth` through the projector.
pub fn repa_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &ActivationTrace,
    teacher: &TeacherOutputs,
    proj: &Bound,
    cfg: &AlignConfig,
) -> Result<Var> {
    let h = *trace
        .hidden
        .get(cfg.feature_depth)
        .ok_or_else(|| Error::Config(format!("trace has no block {}", cfg.feature_depth)))?;
    let (n_s, n_t) = (tape.shape(h)[1], teacher.y.shape()[1]);
    if n_s != n_t {
        return Err(Error::Shape(format!("student has {n_s} tokens but teacher has {n_t}")));
    }
    let z = Projector::forward(tape, proj, h)?;
    repa_from_features(tape, z, &teacher.y)
}

/// Heads `0..m` of a `[B, M, N, N]` attention tensor.
pub fn leading_heads(attn: &Array, m: usize) -> Result<Array> {
    let s = attn.shape();
    if s.len() != 4 || m > s[1] {
        return Err(Error::Shape(format!("cannot take {m} heads of attention tensor {s:?}")));
    }
    let (b, heads, nn) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(b * m * nn);
    for bi in 0..b {
        let start = bi * heads * nn;
        data.extend_from_slice(&attn.data()[start..start + m * nn]);
    }
    Array::new(&[b, m, s[2], s[3]], data)
}

/// Mean token-wise cross-entropy `-sum p_teacher ln q_student` over the
/// configured layer pairs and leading heads; teacher rows are targets.
pub fn atta_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &ActivationTrace,
    teacher: &TeacherOutputs,
    cfg: &AlignConfig,
) -> Result<Var> {
    if cfg.pairs.is_empty() {
        return Err(Error::Config("attention alignment needs at least one layer pair".into()));
    }
    let mut total: Option<Var> = None;
    for &(ls, lt) in &cfg.pairs {
        let student = *trace.attn.get(ls).ok_or_else(|| Error::Config(format!("trace has no block {ls}")))?;
        let target = teacher.attn.get(lt).ok_or_else(|| Error::Config(format!("teacher has no block {lt}")))?;
        if target.is_empty() {
            return Err(Error::Contract(format!("teacher block {lt} was not retained")));
        }
        let (n_s, n_t) = (tape.shape(student)[2], target.shape()[2]);
        if n_s != n_t {
            return Err(Error::Shape(format!("student has {n_s} tokens but teacher has {n_t}")));
        }
        let q = tape.narrow(student, 1, 0, cfg.aligned_heads)?;
        let p = leading_heads(target, cfg.aligned_heads)?.cast::<T>();
        let ce = tape.soft_cross_entropy(q, &p, T::lit(LOG_CLAMP))?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let total = total.expect("nonempty pairs");
    tape.scale(total, T::lit(1.0 / cfg.pairs.len() as f64))
}

/// Terms of the weighted alignment objective; absent terms have zero weight
/// and were never evaluated.
#[derive(Clone, Copy, Debug)]
pub struct HybridParts {
    pub total: Var,
    pub repa: Option<Var>,
    pub atta: Option<Var>,
}

/// `lambda_repa * L_REPA + lambda_atta * L_ATTA`, evaluating only terms with
/// positive weight.
pub fn hybrid_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &ActivationTrace,
    teacher: &TeacherOutputs,
    proj: &Bound,
    cfg: &AlignConfig,
) -> Result<HybridParts> {
    if !(cfg.lambda_repa >= 0.0) || !(cfg.lambda_atta >= 0.0) {
        return Err(Error::Config(format!("loss weights must be >= 0, got {} and {}", cfg.lambda_repa, cfg.lambda_atta)));
    }
    let repa = if cfg.lambda_repa > 0.0 { Some(repa_loss(tape, trace, teacher, proj, cfg)?) } else { None };
    let atta = if cfg.lambda_atta > 0.0 { Some(atta_loss(tape, trace, teacher, cfg)?) } else { None };
    let weighted_r = repa.map(|r| tape.scale(r, T::lit(cfg.lambda_repa as f64))).transpose()?;
    let weighted_a = atta.map(|a| tape.scale(a, T::lit(cfg.lambda_atta as f64))).transpose()?;
    let total = match (weighted_r, weighted_a) {
        (Some(r), Some(a)) => tape.add(r, a)?,
        (Some(r), None) => r,
        (None, Some(a)) => a,
        (None, None) => tape.constant(Array::scalar(T::zero())),
    };
    Ok(HybridParts { total, repa, atta })
}

/// Mean Shannon entropy of the rows of `p`, in nats.
pub fn mean_row_entropy(p: &Array) -> f64 {
    let rows = p.rows().len().max(1);
    p.rows()
        .map(|r| r.iter().filter(|&&v| v > 0.0).map(|&v| -(v as f64) * (v as f64).ln()).sum::<f64>())
        .sum::<f64>()
        / rows as f64
}
