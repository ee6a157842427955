//! Linear-interpolant corruption, the velocity-prediction loss, and the
//! Euler / Euler–Maruyama samplers with classifier-free guidance.
//!
//! Convention: `x_t = (1 - t) x0 + t eps`, so `t = 0` is data and `t = 1` is
//! pure noise; the regression target is the velocity `eps - x0`.

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{Array, Rng, Scalar, Tape, Var};

/// Lower end of the training timestep distribution `U(T_FLOOR, 1)`.
pub const T_FLOOR: f32 = 1e-3;

/// Anything that predicts a velocity field for a batch of noisy images.
pub trait VelocityField {
    /// Number of real classes; label `classes()` is the null label.
    fn classes(&self) -> usize;

    /// Velocity at `x[B, H, W, 1]` for per-sample times and labels.
    fn velocity(&self, x: &Array, t: &[f32], labels: &[usize]) -> Result<Array>;
}

/// One corrupted training batch.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub x0: Array,
    pub eps: Array,
    pub t: Vec<f32>,
    pub labels: Vec<usize>,
}

impl DiffusionBatch {
    /// Draw `eps ~ N(0, I)` and `t ~ U(T_FLOOR, 1)` per sample from `rng`.
    pub fn draw(x0: Array, labels: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let b = x0.shape().first().copied().unwrap_or(0);
        if labels.len() != b {
            return Err(shape_err!("{} labels for a batch of {b}", labels.len()));
        }
        let eps = rng.normal_array(x0.shape());
        let t = (0..b).map(|_| rng.uniform_range(T_FLOOR, 1.0)).collect();
        Ok(Self { x0, eps, t, labels })
    }

    /// Same images and noise at the fixed time `t` for every sample.
    pub fn at_time(x0: Array, eps: Array, t: f32, labels: Vec<usize>) -> Result<Self> {
        let b = x0.shape()[0];
        Ok(Self { x0, eps, t: vec![t; b], labels })
    }

    pub fn x_t(&self) -> Result<Array> {
        corrupt(&self.x0, &self.eps, &self.t)
    }

    pub fn target(&self) -> Result<Array> {
        velocity_target(&self.x0, &self.eps)
    }
}

fn per_sample(x: &Array, t: &[f32]) -> Result<usize> {
    let b = x.shape().first().copied().unwrap_or(0);
    if t.len() != b {
        return Err(shape_err!("{} timesteps for a batch of {b}", t.len()));
    }
    Ok(x.len() / b.max(1))
}

/// `x_t = (1 - t) x0 + t eps`, with `t` given per leading-axis sample.
pub fn corrupt(x0: &Array, eps: &Array, t: &[f32]) -> Result<Array> {
    if x0.shape() != eps.shape() {
        return Err(shape_err!("corrupt: x0 {:?} vs eps {:?}", x0.shape(), eps.shape()));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("timestep {bad} outside [0, 1]")));
    }
    let inner = per_sample(x0, t)?;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let ti = t[i / inner];
            (1.0 - ti) * x + ti * e
        })
        .collect();
    Array::new(x0.shape(), data)
}

/// `v* = eps - x0`, the time derivative of [`corrupt`].
pub fn velocity_target(x0: &Array, eps: &Array) -> Result<Array> {
    if x0.shape() != eps.shape() {
        return Err(shape_err!("velocity_target: x0 {:?} vs eps {:?}", x0.shape(), eps.shape()));
    }
    Array::new(x0.shape(), x0.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect())
}

/// Mean squared error between the predicted velocity and the batch target.
pub fn diffusion_loss<T: Scalar>(tape: &mut Tape<T>, velocity: Var, batch: &DiffusionBatch) -> Result<Var> {
    let target = tape.constant(batch.target()?.cast());
    let diff = tape.sub(velocity, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ode,
    Sde,
}

/// Diffusion coefficient of the reverse SDE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Diffusion {
    /// `g(t) = t`.
    Linear,
    /// `g(t) = 0`: the SDE collapses onto the probability-flow ODE.
    Zero,
}

impl Diffusion {
    fn at(self, t: f32) -> f32 {
        match self {
            Diffusion::Linear => t,
            Diffusion::Zero => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub nfes: usize,
    pub kind: SamplerKind,
    pub cfg_scale: f32,
    pub guidance_interval: (f32, f32),
    pub t_min: f32,
    pub diffusion: Diffusion,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfes: 50,
            kind: SamplerKind::Sde,
            cfg_scale: 1.0,
            guidance_interval: (0.0, 1.0),
            t_min: 0.04,
            diffusion: Diffusion::Linear,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfes == 0 {
            return Err(Error::Config("nfes must be at least 1".into()));
        }
        let (lo, hi) = self.guidance_interval;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("guidance interval [{lo}, {hi}] must be an ordered subrange of [0, 1]")));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        if !(self.cfg_scale >= 1.0) {
            return Err(Error::Config(format!("cfg scale must be >= 1, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Classifier-free guided velocity at a time shared by the whole batch.
///
/// Inside the guidance interval (and for `w != 1`) this evaluates both the
/// conditional and the null-label branch; otherwise it is exactly the
/// conditional prediction.
pub fn cfg_velocity<M: VelocityField + ?Sized>(
    model: &M,
    x_t: &Array,
    t: f32,
    labels: &[usize],
    cfg: &SamplerConfig,
) -> Result<Array> {
    let ts = vec![t; labels.len()];
    let v_cond = model.velocity(x_t, &ts, labels)?;
    let (lo, hi) = cfg.guidance_interval;
    if cfg.cfg_scale == 1.0 || t < lo || t > hi {
        return Ok(v_cond);
    }
    let null = vec![model.classes(); labels.len()];
    let v_uncond = model.velocity(x_t, &ts, &null)?;
    Ok(guide(&v_cond, &v_uncond, cfg.cfg_scale))
}

fn guide(v_cond: &Array, v_uncond: &Array, w: f32) -> Array {
    let data = v_cond.data().iter().zip(v_uncond.data()).map(|(&c, &u)| u + w * (c - u)).collect();
    Array::new(v_cond.shape(), data).expect("same shape")
}

/// Balanced class labels for `n` chains.
pub fn chain_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes.max(1)).collect()
}

fn start_noise(cfg: &SamplerConfig, n: usize, size: usize) -> (Array, Rng) {
    let root = Rng::new(cfg.seed);
    let x = root.split("start").normal_array(&[n, size, size, 1]);
    (x, root.split("path"))
}

/// Explicit Euler on `dx/dt = v` from `t = 1` to `t = 0` in `nfes` uniform
/// steps, starting from standard normal noise.
pub fn sample_ode<M: VelocityField + ?Sized>(model: &M, cfg: &SamplerConfig, n: usize, size: usize) -> Result<Array> {
    cfg.validate()?;
    let (x, _) = start_noise(cfg, n, size);
    let labels = chain_labels(n, model.classes());
    integrate(model, cfg, x, &labels, Diffusion::Zero, None)
}

/// Euler–Maruyama on the reverse SDE with drift `v - (g/2) s` and noise
/// `sqrt(g dt) xi`, where `s = -(x + (1 - t) v) / t`.
///
/// Steps lie on the same uniform grid as [`sample_ode`]; the stochastic
/// phase runs down to the last grid point not below `t_min` and the
/// remaining steps are deterministic Euler steps ending at `t = 0`.
pub fn sample_sde<M: VelocityField + ?Sized>(model: &M, cfg: &SamplerConfig, n: usize, size: usize) -> Result<Array> {
    cfg.validate()?;
    let (x, mut path) = start_noise(cfg, n, size);
    let labels = chain_labels(n, model.classes());
    integrate(model, cfg, x, &labels, cfg.diffusion, Some(&mut path))
}

/// Dispatch on `cfg.kind`.
pub fn sample<M: VelocityField + ?Sized>(model: &M, cfg: &SamplerConfig, n: usize, size: usize) -> Result<Array> {
    match cfg.kind {
        SamplerKind::Ode => sample_ode(model, cfg, n, size),
        SamplerKind::Sde => sample_sde(model, cfg, n, size),
    }
}

fn integrate<M: VelocityField + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    mut x: Array,
    labels: &[usize],
    diffusion: Diffusion,
    mut path: Option<&mut Rng>,
) -> Result<Array> {
    let steps = cfg.nfes;
    let dt = 1.0 / steps as f32;
    for i in 0..steps {
        let t = 1.0 - i as f32 * dt;
        let t_next = 1.0 - (i + 1) as f32 * dt;
        let v = cfg_velocity(model, &x, t, labels, cfg)?;
        let g = if t_next >= cfg.t_min - 1e-6 { diffusion.at(t) } else { 0.0 };
        let data = x.data_mut();
        if g > 0.0 {
            let rng = path.as_deref_mut().ok_or_else(|| Error::Contract("stochastic step without a noise stream".into()))?;
            let noise = (g * dt).sqrt();
            for (xi, &vi) in data.iter_mut().zip(v.data()) {
                let score = -(*xi + (1.0 - t) * vi) / t;
                let drift = vi - 0.5 * g * score;
                *xi = *xi - dt * drift + noise * rng.normal();
            }
        } else {
            for (xi, &vi) in data.iter_mut().zip(v.data()) {
                *xi -= dt * vi;
            }
        }
        x.ensure_finite(&format!("sampler step {i} (t = {t})"))?;
    }
    Ok(x)
}

/// Exact velocity field of the interpolant when the data distribution is
/// `N(mu, sigma^2 I)`; `sigma = 0` is a point mass. Useful as an oracle.
#[derive(Clone, Copy, Debug)]
pub struct GaussianField {
    pub mu: f32,
    pub sigma: f32,
}

impl GaussianField {
    /// Where the exact flow carries a starting noise value `e` at `t = 1`.
    pub fn flow_endpoint(&self, e: f32) -> f32 {
        self.mu + self.sigma * e
    }
}

impl VelocityField for GaussianField {
    fn classes(&self) -> usize {
        1
    }

    fn velocity(&self, x: &Array, t: &[f32], _labels: &[usize]) -> Result<Array> {
        let inner = per_sample(x, t)?;
        let (mu, s2) = (self.mu as f64, (self.sigma as f64).powi(2));
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let t = t[i / inner] as f64;
                let a = 1.0 - t;
                let var = a * a * s2 + t * t;
                ((t - a * s2) / var * (xi as f64 - a * mu) - mu) as f32
            })
            .collect();
        Array::new(x.shape(), data)
    }
}
