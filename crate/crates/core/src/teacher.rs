//! Frozen vision encoder providing patch embeddings and attention maps, its
//! supervised desk-scale pretraining, and the low-pass input filter.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TensorKind};
use crate::error::{Error, Result};
use crate::ndgrad::{Array, Bound, ParamSet, Rng, Scalar, Tape, Var};
use crate::nn;
use crate::optim::{AdamState, AdamW};
use crate::synthdata::{self, ShapeSample};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TeacherConfig {
    /// 6 blocks of width 96 with 4 heads, on the student's token grid.
    pub fn desk() -> Self {
        Self { depth: 6, width: 96, heads: 4, patch: 4, image_size: 16, classes: 8, mlp_ratio: 4 }
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch == 0 || self.classes == 0 {
            return Err(Error::Config("teacher depth, width, heads, patch and classes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!("teacher width {} must divide into {} heads and by 4", self.width, self.heads)));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("image size {} is not divisible by patch {}", self.image_size, self.patch)));
        }
        Ok(())
    }
}

/// Encoder outputs for a batch of clean images.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    /// Final-layer patch embeddings `[B, N, d_T]`.
    pub y: Array,
    /// Post-softmax maps `[B, M_T, N, N]` of every block.
    pub attn: Vec<Array>,
}

impl TeacherOutputs {
    pub fn attn_map(&self, layer: usize, m: usize) -> Result<Array> {
        let a = self.attn.get(layer).ok_or_else(|| Error::Shape(format!("no teacher block {layer}")))?;
        nn::head_map(a, m)
    }

    pub fn batch(&self) -> usize {
        self.y.shape()[0]
    }

    /// Rows `idx` of every output, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<TeacherOutputs> {
        let pick = |a: &Array| -> Result<Array> {
            if a.is_empty() {
                return Ok(a.clone());
            }
            let rows: Vec<Array> = idx.iter().map(|&i| a.index0(i)).collect::<Result<_>>()?;
            Array::stack(&rows)
        };
        Ok(TeacherOutputs { y: pick(&self.y)?, attn: self.attn.iter().map(pick).collect::<Result<_>>()? })
    }

    /// Keep only the blocks listed in `layers` (others become empty arrays),
    /// to bound the memory of cached outputs.
    pub fn retain_layers(&mut self, layers: &[usize]) {
        for (l, a) in self.attn.iter_mut().enumerate() {
            if !layers.contains(&l) {
                *a = Array::zeros(&[0]);
            }
        }
    }

    /// Concatenate along the batch axis.
    pub fn concat(parts: &[TeacherOutputs]) -> Result<TeacherOutputs> {
        let first = parts.first().ok_or_else(|| Error::Shape("no teacher outputs to concatenate".into()))?;
        let y = Array::concat0(&parts.iter().map(|p| &p.y).collect::<Vec<_>>())?;
        let attn = (0..first.attn.len())
            .map(|l| {
                if first.attn[l].is_empty() {
                    Ok(Array::zeros(&[0]))
                } else {
                    Array::concat0(&parts.iter().map(|p| &p.attn[l]).collect::<Vec<_>>())
                }
            })
            .collect::<Result<_>>()?;
        Ok(TeacherOutputs { y, attn })
    }
}

/// Frozen encoder weights and their checksum.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub cfg: TeacherConfig,
    pub params: ParamSet,
    frozen: bool,
}

/// Summary of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f32>,
    /// Accuracy of the classification head on the holdout set, measured
    /// just before the head is discarded.
    pub holdout_accuracy: f64,
    /// Set when the loss failed to decrease over the first 100 steps.
    pub divergence_warning: Option<String>,
}

impl Teacher {
    /// Randomly initialised, unfrozen encoder.
    pub fn init(cfg: TeacherConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut p = ParamSet::new();
        nn::init_linear(&mut p, rng, "patch", cfg.patch * cfg.patch, d)?;
        let g = cfg.image_size / cfg.patch;
        p.insert("pos", nn::sincos_2d(g, d))?;
        for l in 0..cfg.depth {
            nn::init_attention(&mut p, rng, &format!("block{l}.attn"), d)?;
            nn::init_mlp(&mut p, rng, &format!("block{l}.mlp"), d, cfg.mlp_ratio * d)?;
        }
        Ok(Self { cfg, params: p, frozen: false })
    }

    /// Wrap existing weights, e.g. loaded from a checkpoint, as frozen.
    pub fn from_frozen(cfg: TeacherConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params, frozen: true })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        checksum(&self.params)
    }

    /// Frozen weights plus architecture and checksum in the header.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if !self.frozen {
            return Err(Error::Contract("only frozen teachers are saved".into()));
        }
        let c = &self.cfg;
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "teacher",
            "checksum": self.checksum(),
            "depth": c.depth, "width": c.width, "heads": c.heads, "patch": c.patch,
            "image_size": c.image_size, "classes": c.classes, "mlp_ratio": c.mlp_ratio,
        }));
        ck.push_set("", TensorKind::Param, &self.params);
        Ok(ck)
    }

    /// Load frozen weights, verifying the stored checksum.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        if m["kind"] != "teacher" {
            return Err(Error::Format("not a teacher checkpoint".into()));
        }
        let field = |k: &str| m[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::Format(format!("teacher header lacks {k}")));
        let cfg = TeacherConfig {
            depth: field("depth")?,
            width: field("width")?,
            heads: field("heads")?,
            patch: field("patch")?,
            image_size: field("image_size")?,
            classes: field("classes")?,
            mlp_ratio: field("mlp_ratio")?,
        };
        let teacher = Self::from_frozen(cfg, ck.take_set("", TensorKind::Param)?)?;
        if m["checksum"].as_str() != Some(teacher.checksum().as_str()) {
            return Err(Error::Format("teacher weights do not match their checksum".into()));
        }
        let layout = Self::init(teacher.cfg.clone(), &mut Rng::new(0))?;
        let same = teacher.params.len() == layout.params.len()
            && teacher.params.iter().zip(layout.params.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::Format("teacher tensors do not match the stored architecture".into()));
        }
        Ok(teacher)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Record the encoder on `tape`; returns the token states before the
    /// final normalisation `[B, N, d_T]` and every block's attention maps.
    pub fn forward<T: Scalar>(cfg: &TeacherConfig, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let b = tape.shape(x)[0];
        let n = cfg.tokens();
        let d = cfg.width;
        let patches = nn::patchify(tape, x, cfg.patch)?;
        let tokens = nn::linear(tape, p, "patch", patches)?;
        let pos = tape.reshape(p.var("pos")?, &[1, n * d])?;
        let pos = tape.broadcast_axis1(pos, b)?;
        let pos = tape.reshape(pos, &[b, n, d])?;
        let mut h = tape.add(tokens, pos)?;
        let eps = T::lit(nn::LN_EPS);
        let mut maps = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let a = tape.layer_norm(h, eps)?;
            let (a, attn) = nn::attention(tape, p, &format!("block{l}.attn"), a, cfg.heads)?;
            h = tape.add(h, a)?;
            let m = tape.layer_norm(h, eps)?;
            let m = nn::mlp(tape, p, &format!("block{l}.mlp"), m)?;
            h = tape.add(h, m)?;
            maps.push(attn);
        }
        Ok((h, maps))
    }

    /// Patch embeddings and attention maps of clean images `x[B, H, W, 1]`.
    pub fn encode(&self, x: &Array) -> Result<TeacherOutputs> {
        if !self.frozen {
            return Err(Error::Contract("teacher must be frozen before encoding".into()));
        }
        let s = x.shape();
        let expect = [s.first().copied().unwrap_or(0), self.cfg.image_size, self.cfg.image_size, 1];
        if s != expect {
            return Err(Error::Shape(format!("teacher input {s:?}, expected {expect:?}")));
        }
        let mut tape: Tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (h, maps) = Self::forward(&self.cfg, &mut tape, &p, xv)?;
        let y = tape.layer_norm(h, nn::LN_EPS as f32)?;
        Ok(TeacherOutputs { y: tape.value(y).clone(), attn: maps.iter().map(|&m| tape.value(m).clone()).collect() })
    }

    /// Encode many images in chunks, keeping only the listed attention blocks.
    pub fn encode_all(&self, images: &Array, chunk: usize, layers: &[usize]) -> Result<TeacherOutputs> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let rows: Vec<Array> = (start..end).map(|i| images.index0(i)).collect::<Result<_>>()?;
            let mut out = self.encode(&Array::stack(&rows)?)?;
            out.retain_layers(layers);
            parts.push(out);
            start = end;
        }
        TeacherOutputs::concat(&parts)
    }

    /// Predicted classes from a linear head on mean-pooled final tokens.
    fn logits<T: Scalar>(cfg: &TeacherConfig, tape: &mut Tape<T>, p: &Bound, head: &Bound, x: Var) -> Result<Var> {
        let (h, _) = Self::forward(cfg, tape, p, x)?;
        let h = tape.layer_norm(h, T::lit(nn::LN_EPS))?;
        let pooled = tape.mean_axis(h, 1)?;
        nn::linear(tape, head, "head", pooled)
    }
}

pub fn checksum(params: &ParamSet) -> String {
    let mut hasher = Sha256::new();
    for (name, a) in params.iter() {
        hasher.update(name.as_bytes());
        for &s in a.shape() {
            hasher.update((s as u64).to_le_bytes());
        }
        for &v in a.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Options for [`pretrain_teacher`].
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 64, lr: 1e-3, seed: 0 }
    }
}

/// Supervised classification pretraining of the encoder on labelled shapes.
/// The classification head is discarded and the returned teacher is frozen.
pub fn pretrain_teacher(
    cfg: TeacherConfig,
    train: &[ShapeSample],
    holdout: &[ShapeSample],
    opts: &PretrainConfig,
) -> Result<(Teacher, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::Domain("teacher pretraining needs at least one sample".into()));
    }
    let root = Rng::new(opts.seed);
    let mut teacher = Teacher::init(cfg.clone(), &mut root.split("init"))?;
    let mut head = ParamSet::new();
    nn::init_linear(&mut head, &mut root.split("head"), "head", cfg.width, cfg.classes)?;
    let opt = AdamW { lr: opts.lr, ..AdamW::default() };
    let mut st = AdamState::new(&teacher.params);
    let mut st_head = AdamState::new(&head);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut rng = root.split_index("batch", step as u64);
        let picks: Vec<&ShapeSample> = (0..opts.batch).map(|_| &train[rng.below(train.len())]).collect();
        let (x, labels) = synthdata::batch(&picks)?;
        let mut tape: Tape = Tape::new();
        let p = teacher.params.bind(&mut tape);
        let hb = head.bind(&mut tape);
        let xv = tape.constant(x);
        let logits = Teacher::logits(&cfg, &mut tape, &p, &hb, xv)?;
        let loss = tape.cross_entropy_logits(logits, &labels)?;
        losses.push(tape.value(loss).item());
        tape.backward(loss)?;
        opt.step(&mut teacher.params, &p.grads(&tape), &mut st)?;
        opt.step(&mut head, &hb.grads(&tape), &mut st_head)?;
    }
    let divergence_warning = divergence_check(&losses);
    let holdout_accuracy = accuracy(&teacher, &head, holdout)?;
    teacher.freeze();
    Ok((teacher, PretrainReport { losses, holdout_accuracy, divergence_warning }))
}

fn accuracy(teacher: &Teacher, head: &ParamSet, samples: &[ShapeSample]) -> Result<f64> {
    let mut correct = 0;
    for chunk in samples.chunks(256) {
        let refs: Vec<&ShapeSample> = chunk.iter().collect();
        let (x, labels) = synthdata::batch(&refs)?;
        let mut tape: Tape = Tape::new();
        let p = teacher.params.bind_frozen(&mut tape);
        let hb = head.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let logits = Teacher::logits(&teacher.cfg, &mut tape, &p, &hb, xv)?;
        correct += tape.value(logits).rows().zip(&labels).filter(|(row, &label)| argmax(row) == label).count();
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn divergence_check(losses: &[f32]) -> Option<String> {
    let window = losses.len().min(100);
    if window < 20 {
        return None;
    }
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&losses[..10]), mean(&losses[window - 10..window]));
    (late >= early).then(|| format!("TrainingDivergence: loss did not decrease over the first {window} steps ({early:.4} -> {late:.4})"))
}

/// Largest radial frequency index present on an `h x w` grid.
pub fn nyquist_radius(h: usize, w: usize) -> f64 {
    ((h / 2).pow(2) as f64 + (w / 2).pow(2) as f64).sqrt()
}

/// Zero every 2-D Fourier coefficient whose radial frequency index exceeds
/// `k`, per image and channel, for `x[B, H, W, C]`.
pub fn low_pass(x: &Array, k: f64) -> Result<Array> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("low_pass expects [B, H, W, C], got {s:?}")));
    }
    if !(k >= 0.0) {
        return Err(Error::Domain(format!("cutoff radius must be >= 0, got {k}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut planner = FftPlanner::<f64>::new();
    let (fw, fh) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let (iw, ih) = (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h));
    let signed = |i: usize, n: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    let mut out = x.data().to_vec();
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for bi in 0..b {
        for ci in 0..c {
            let at = |r: usize, q: usize| ((bi * h + r) * w + q) * c + ci;
            for r in 0..h {
                for q in 0..w {
                    buf[r * w + q] = Complex::new(x.data()[at(r, q)] as f64, 0.0);
                }
            }
            fft2(&mut buf, &mut col, h, w, fw.as_ref(), fh.as_ref());
            for r in 0..h {
                for q in 0..w {
                    if signed(r, h).hypot(signed(q, w)) > k {
                        buf[r * w + q] = Complex::new(0.0, 0.0);
                    }
                }
            }
            fft2(&mut buf, &mut col, h, w, iw.as_ref(), ih.as_ref());
            let norm = (h * w) as f64;
            for r in 0..h {
                for q in 0..w {
                    let v = buf[r * w + q] / norm;
                    debug_assert!(v.im.abs() <= 1e-5, "imaginary residue {}", v.im);
                    out[at(r, q)] = v.re as f32;
                }
            }
        }
    }
    Array::new(s, out)
}

fn fft2(
    buf: &mut [Complex<f64>],
    col: &mut [Complex<f64>],
    h: usize,
    w: usize,
    row_fft: &dyn rustfft::Fft<f64>,
    col_fft: &dyn rustfft::Fft<f64>,
) {
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    for q in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + q];
        }
        col_fft.process(col);
        for r in 0..h {
            buf[r * w + q] = col[r];
        }
    }
}
