//! Sample-quality distances and alignment-progress probes.

use serde::Serialize;

use crate::align::{atta_loss, AlignConfig, Projector, COSINE_EPS};
use crate::error::{Error, Result};
use crate::interpolant::corrupt;
use crate::ndgrad::{Array, ParamSet, Rng, Tape};
use crate::student::Student;
use crate::teacher::TeacherOutputs;

/// Kernel bandwidths for [`mmd_rbf`].
#[derive(Clone, Debug, PartialEq)]
pub enum Bandwidths {
    /// Explicit Gaussian widths.
    Fixed(Vec<f64>),
    /// Multiples of the median pairwise distance of the pooled samples.
    Median(Vec<f64>),
}

impl Default for Bandwidths {
    fn default() -> Self {
        Bandwidths::Median(vec![0.5, 1.0, 2.0, 4.0])
    }
}

/// Rows of `[n, ..]` as f64 vectors.
fn flat_rows(x: &Array) -> Vec<Vec<f64>> {
    let n = x.shape().first().copied().unwrap_or(0);
    let d = x.len() / n.max(1);
    x.data().chunks_exact(d.max(1)).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Put the pair in a canonical order so estimators are exactly symmetric.
fn canonical<'a>(x: &'a Array, y: &'a Array) -> (&'a Array, &'a Array) {
    let key = |a: &Array| (a.shape().to_vec(), a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    if key(y) < key(x) {
        (y, x)
    } else {
        (x, y)
    }
}

fn resolve_bandwidths(bw: &Bandwidths, x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<f64> {
    match bw {
        Bandwidths::Fixed(v) => v.clone(),
        Bandwidths::Median(mult) => {
            let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
            let mut d: Vec<f64> = Vec::with_capacity(pooled.len() * pooled.len() / 2);
            for i in 0..pooled.len() {
                for j in 0..i {
                    d.push(sq_dist(pooled[i], pooled[j]).sqrt());
                }
            }
            d.sort_by(f64::total_cmp);
            let mut med = d.get(d.len() / 2).copied().unwrap_or(1.0);
            if med <= 0.0 {
                med = d.iter().copied().find(|&v| v > 0.0).unwrap_or(1.0);
            }
            mult.iter().map(|m| m * med).collect()
        }
    }
}

/// Unbiased squared maximum mean discrepancy with the average of Gaussian
/// kernels `exp(-|a - b|^2 / (2 s^2))` over the bandwidths, clamped at 0.
/// Samples are the rows of `x[n, ..]` and `y[m, ..]`.
pub fn mmd_rbf(x: &Array, y: &Array, bandwidths: &Bandwidths) -> Result<f64> {
    let (x, y) = canonical(x, y);
    let (xs, ys) = (flat_rows(x), flat_rows(y));
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::Domain("MMD needs at least two samples per set".into()));
    }
    if xs[0].len() != ys[0].len() {
        return Err(Error::Shape(format!("sample widths differ: {} vs {}", xs[0].len(), ys[0].len())));
    }
    let widths = resolve_bandwidths(bandwidths, &xs, &ys);
    if widths.is_empty() || widths.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("bandwidths must be positive, got {widths:?}")));
    }
    let k = |a: &[f64], b: &[f64]| {
        let d2 = sq_dist(a, b);
        widths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / widths.len() as f64
    };
    let within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    total += k(&s[i], &s[j]);
                }
            }
        }
        total / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in &xs {
        for b in &ys {
            cross += k(a, b);
        }
    }
    cross /= (xs.len() * ys.len()) as f64;
    Ok((within(&xs) + within(&ys) - 2.0 * cross).max(0.0))
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|`, clamped at 0.
pub fn energy_distance(x: &Array, y: &Array) -> Result<f64> {
    let (x, y) = canonical(x, y);
    let (xs, ys) = (flat_rows(x), flat_rows(y));
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::Domain("energy distance needs at least two samples per set".into()));
    }
    let mean_dist = |a: &[Vec<f64>], b: &[Vec<f64>], skip_diag: bool| {
        let (mut total, mut count) = (0.0, 0usize);
        for (i, p) in a.iter().enumerate() {
            for (j, q) in b.iter().enumerate() {
                if skip_diag && i == j {
                    continue;
                }
                total += sq_dist(p, q).sqrt();
                count += 1;
            }
        }
        total / count as f64
    };
    Ok((2.0 * mean_dist(&xs, &ys, false) - mean_dist(&xs, &xs, true) - mean_dist(&ys, &ys, true)).max(0.0))
}

/// Summary written by the `eval` verb and the trainer's evaluation hook.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mmd: f64,
    pub energy_distance: f64,
    /// Basis-free (relational) cosine between student and teacher features.
    pub feat_cos: f64,
    /// Token cosine between projected student features and teacher features.
    pub feat_cos_projected: f64,
    pub attn_ce: f64,
    pub n_samples: usize,
}

/// Fixed clean images, noise and teacher targets for progress probes.
#[derive(Clone, Debug)]
pub struct ProgressProbe {
    pub images: Array,
    pub labels: Vec<usize>,
    pub eps: Array,
    pub t: f32,
    pub teacher: TeacherOutputs,
}

/// Default probe timestep for [`alignment_progress`].
pub const PROGRESS_T: f32 = 0.25;

impl ProgressProbe {
    pub fn new(images: Array, labels: Vec<usize>, teacher: TeacherOutputs, t: f32, seed: u64) -> Self {
        let eps = Rng::new(seed).split("progress-noise").normal_array(images.shape());
        Self { images, labels, eps, t, teacher }
    }
}

/// Mean over images of the correlation between the off-diagonal token
/// cosine-similarity entries of `a[B, N, d_a]` and `b[B, N, d_b]`, after
/// centring each image's tokens. Equals 1 when `a == b` and does not
/// require `d_a == d_b`.
pub fn relational_cosine(a: &Array, b: &Array) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
        return Err(Error::Shape(format!("relational cosine of {sa:?} and {sb:?}")));
    }
    let n = sa[1];
    if n < 3 {
        return Err(Error::Shape("relational cosine needs at least three tokens".into()));
    }
    let gram = |x: &Array, bi: usize| -> Vec<f64> {
        let d = x.shape()[2];
        let rows: Vec<Vec<f64>> =
            (0..n).map(|i| x.data()[(bi * n + i) * d..(bi * n + i + 1) * d].iter().map(|&v| v as f64).collect()).collect();
        let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
        let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
        let norms: Vec<f64> = centred.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS)).collect();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(p, q)| p * q).sum();
                out.push(dot / (norms[i] * norms[j]));
            }
        }
        out
    };
    let corr = |p: &[f64], q: &[f64]| {
        let (mp, mq) = (p.iter().sum::<f64>() / p.len() as f64, q.iter().sum::<f64>() / q.len() as f64);
        let (mut num, mut vp, mut vq) = (0.0, 0.0, 0.0);
        for (x, y) in p.iter().zip(q) {
            num += (x - mp) * (y - mq);
            vp += (x - mp) * (x - mp);
            vq += (y - mq) * (y - mq);
        }
        num / (vp * vq).sqrt().max(1e-12)
    };
    let batch = sa[0];
    Ok((0..batch).map(|bi| corr(&gram(a, bi), &gram(b, bi))).sum::<f64>() / batch.max(1) as f64)
}

/// Mean token cosine between `a` and `b` of identical shape `[.., d]`.
pub fn token_cosine(a: &Array, b: &Array) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("token cosine of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (sum, count) = a.rows().zip(b.rows()).fold((0.0, 0usize), |(s, c), (p, q)| {
        let dot: f64 = p.iter().zip(q).map(|(&x, &y)| x as f64 * y as f64).sum();
        let np = p.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(COSINE_EPS);
        let nq = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(COSINE_EPS);
        (s + dot / (np * nq), c + 1)
    });
    Ok(sum / count.max(1) as f64)
}

/// Alignment-progress metrics on the probe images at the probe timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    /// Relational cosine of block `feature_depth` against teacher features.
    pub feat_cos: f64,
    /// Token cosine of the projected block output against teacher features.
    pub feat_cos_projected: f64,
    /// Mean attention cross-entropy over the configured pairs.
    pub attn_ce: f64,
}

pub fn alignment_progress(student: &Student, proj: &ParamSet, probe: &ProgressProbe, cfg: &AlignConfig) -> Result<Progress> {
    let b = probe.labels.len();
    let x_t = corrupt(&probe.images, &probe.eps, &vec![probe.t; b])?;
    let mut tape: Tape = Tape::new();
    let sp = student.params.bind_frozen(&mut tape);
    let pp = proj.bind_frozen(&mut tape);
    let xv = tape.constant(x_t);
    let (_, trace) = Student::forward(&student.cfg, &mut tape, &sp, xv, &vec![probe.t; b], &probe.labels)?;
    let h = trace.hidden[cfg.feature_depth];
    let z = Projector::forward(&mut tape, &pp, h)?;
    let attn_ce = if cfg.pairs.is_empty() {
        f64::NAN
    } else {
        let l = atta_loss(&mut tape, &trace, &probe.teacher, cfg)?;
        tape.value(l).item() as f64
    };
    Ok(Progress {
        feat_cos: relational_cosine(tape.value(h), &probe.teacher.y)?,
        feat_cos_projected: token_cosine(tape.value(z), &probe.teacher.y)?,
        attn_ce,
    })
}
