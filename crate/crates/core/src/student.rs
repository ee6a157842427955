//! Class-conditional diffusion transformer that predicts velocity and
//! exposes its hidden states and attention maps.

use crate::error::{Error, Result};
use crate::interpolant::VelocityField;
use crate::ndgrad::{Array, Bound, ParamSet, Rng, Scalar, Tape, Var};
use crate::nn;

#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub classes: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
    pub label_dropout: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl StudentConfig {
    /// 4 blocks of width 64 with 4 heads on 16x16 images in 4x4 patches.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            patch: 4,
            image_size: 16,
            classes: 8,
            time_dim: 64,
            mlp_ratio: 4,
            label_dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn null_label(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch == 0 || self.classes == 0 {
            return fail("student depth, width, heads, patch and classes must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if !self.width.is_multiple_of(4) {
            return fail(format!("width {} must be a multiple of 4 for the position table", self.width));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return fail(format!("image size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        if self.time_dim < 2 || self.mlp_ratio == 0 {
            return fail("time_dim must be >= 2 and mlp_ratio >= 1".into());
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return fail(format!("label dropout must be in [0, 1), got {}", self.label_dropout));
        }
        Ok(())
    }
}

/// Hidden states `[B, N, d]` after every block and attention maps
/// `[B, M, N, N]` of every block, recorded on the forward tape.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub hidden: Vec<Var>,
    pub attn: Vec<Var>,
}

/// Materialised [`ActivationTrace`].
#[derive(Clone, Debug)]
pub struct TraceValues {
    pub hidden: Vec<Array>,
    pub attn: Vec<Array>,
}

impl ActivationTrace {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> TraceValues {
        TraceValues {
            hidden: self.hidden.iter().map(|&v| tape.value(v).cast()).collect(),
            attn: self.attn.iter().map(|&v| tape.value(v).cast()).collect(),
        }
    }
}

impl TraceValues {
    /// Map of head `m` in block `layer`, `[B, N, N]`.
    pub fn attn_map(&self, layer: usize, m: usize) -> Result<Array> {
        let a = self.attn.get(layer).ok_or_else(|| Error::Shape(format!("no block {layer} in trace")))?;
        nn::head_map(a, m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub cfg: StudentConfig,
    pub params: ParamSet,
}

impl Student {
    /// Glorot-initialised weights with zero-initialised modulation and
    /// output projection, so the initial prediction is exactly zero.
    pub fn init(cfg: StudentConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut p = ParamSet::new();
        nn::init_linear(&mut p, rng, "patch", cfg.patch * cfg.patch, d)?;
        p.insert("pos", nn::sincos_2d(cfg.grid(), d))?;
        let small = |shape: &[usize], rng: &mut Rng| rng.normal_array(shape).map(|v| 0.02 * v);
        p.insert("temb.fc1.w", small(&[cfg.time_dim, d], rng))?;
        p.insert("temb.fc1.b", Array::zeros(&[d]))?;
        p.insert("temb.fc2.w", small(&[d, d], rng))?;
        p.insert("temb.fc2.b", Array::zeros(&[d]))?;
        p.insert("class", small(&[cfg.classes + 1, d], rng))?;
        for l in 0..cfg.depth {
            nn::init_zero_linear(&mut p, &format!("block{l}.ada"), d, 6 * d)?;
            nn::init_attention(&mut p, rng, &format!("block{l}.attn"), d)?;
            nn::init_mlp(&mut p, rng, &format!("block{l}.mlp"), d, cfg.mlp_ratio * d)?;
        }
        nn::init_zero_linear(&mut p, "final.ada", d, 2 * d)?;
        nn::init_zero_linear(&mut p, "final.out", d, cfg.patch * cfg.patch)?;
        Ok(Self { cfg, params: p })
    }

    /// Record the forward pass for images `x[B, H, W, 1]` on `tape` using the
    /// bound parameters; returns the velocity `[B, H, W, 1]` and the trace.
    pub fn forward<T: Scalar>(
        cfg: &StudentConfig,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        t: &[f32],
        labels: &[usize],
    ) -> Result<(Var, ActivationTrace)> {
        let s = tape.shape(x).to_vec();
        let expect = [t.len(), cfg.image_size, cfg.image_size, 1];
        if s != expect {
            return Err(Error::Shape(format!("student input {s:?}, expected {expect:?}")));
        }
        if labels.len() != t.len() {
            return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), t.len())));
        }
        if let Some(bad) = labels.iter().find(|&&c| c > cfg.classes) {
            return Err(Error::Domain(format!("label {bad} exceeds the null label {}", cfg.classes)));
        }
        let d = cfg.width;
        let n = cfg.tokens();

        let patches = nn::patchify(tape, x, cfg.patch)?;
        let tokens = nn::linear(tape, p, "patch", patches)?;
        let pos = p.var("pos")?;
        let pos = tape.reshape(pos, &[1, n * d])?;
        let pos = tape.broadcast_axis1(pos, t.len())?;
        let pos = tape.reshape(pos, &[t.len(), n, d])?;
        let mut h = tape.add(tokens, pos)?;

        let temb = tape.constant(nn::timestep_embedding(t, cfg.time_dim, 1000.0));
        let temb = nn::linear(tape, p, "temb.fc1", temb)?;
        let temb = tape.silu(temb)?;
        let temb = nn::linear(tape, p, "temb.fc2", temb)?;
        let cemb = tape.gather(p.var("class")?, labels)?;
        let cond = tape.add(temb, cemb)?;
        let cond = tape.silu(cond)?;

        let mut trace = ActivationTrace { hidden: Vec::with_capacity(cfg.depth), attn: Vec::with_capacity(cfg.depth) };
        let eps = T::lit(nn::LN_EPS);
        for l in 0..cfg.depth {
            let ada = nn::linear(tape, p, &format!("block{l}.ada"), cond)?;
            let chunk = |tape: &mut Tape<T>, i: usize| tape.narrow(ada, 1, i * d, d);
            let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
            let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

            let a = tape.layer_norm(h, eps)?;
            let a = nn::modulate(tape, a, shift1, scale1)?;
            let (a, attn) = nn::attention(tape, p, &format!("block{l}.attn"), a, cfg.heads)?;
            h = nn::gated_residual(tape, h, gate1, a)?;

            let m = tape.layer_norm(h, eps)?;
            let m = nn::modulate(tape, m, shift2, scale2)?;
            let m = nn::mlp(tape, p, &format!("block{l}.mlp"), m)?;
            h = nn::gated_residual(tape, h, gate2, m)?;

            trace.hidden.push(h);
            trace.attn.push(attn);
        }

        let ada = nn::linear(tape, p, "final.ada", cond)?;
        let shift = tape.narrow(ada, 1, 0, d)?;
        let scale = tape.narrow(ada, 1, d, d)?;
        let out = tape.layer_norm(h, eps)?;
        let out = nn::modulate(tape, out, shift, scale)?;
        let out = nn::linear(tape, p, "final.out", out)?;
        let v = nn::unpatchify(tape, out, cfg.patch, cfg.image_size)?;
        Ok((v, trace))
    }

    /// Inference forward with frozen parameters.
    pub fn predict(&self, x: &Array, t: &[f32], labels: &[usize]) -> Result<(Array, TraceValues)> {
        let mut tape: Tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (v, trace) = Self::forward(&self.cfg, &mut tape, &p, xv, t, labels)?;
        Ok((tape.value(v).clone(), trace.values(&tape)))
    }
}

impl VelocityField for Student {
    fn classes(&self) -> usize {
        self.cfg.classes
    }

    fn velocity(&self, x: &Array, t: &[f32], labels: &[usize]) -> Result<Array> {
        let mut tape: Tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (v, _) = Self::forward(&self.cfg, &mut tape, &p, xv, t, labels)?;
        Ok(tape.value(v).clone())
    }
}

/// Replace each label by `null` independently with probability `rate`.
pub fn apply_label_dropout(labels: &[usize], rate: f64, null: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("label dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(labels.iter().map(|&c| if rng.uniform_f64() < rate { null } else { c }).collect())
}
