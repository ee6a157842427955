//! Transformer building blocks shared by the student and the teacher.

use crate::error::{shape_err, Result};
use crate::ndgrad::{xavier, Array, Bound, ParamSet, Rng, Scalar, Tape, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Register `{name}.w` (Glorot) and `{name}.b` (zeros).
pub(crate) fn init_linear(p: &mut ParamSet, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    p.insert(format!("{name}.w"), xavier(rng, fan_in, fan_out))?;
    p.insert(format!("{name}.b"), Array::zeros(&[fan_out]))
}

/// Register a zero-initialised affine layer.
pub(crate) fn init_zero_linear(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    p.insert(format!("{name}.w"), Array::zeros(&[fan_in, fan_out]))?;
    p.insert(format!("{name}.b"), Array::zeros(&[fan_out]))
}

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    tape.linear(x, w, Some(bias))
}

/// Split `[B, H, W, 1]` images into `[B, N, p*p]` patch rows (row-major grid).
pub(crate) fn patchify<T: Scalar>(tape: &mut Tape<T>, x: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[3] != 1 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(shape_err!("expected [B, H, W, 1] with H, W divisible by {patch}, got {s:?}"));
    }
    let (b, gh, gw) = (s[0], s[1] / patch, s[2] / patch);
    let r = tape.reshape(x, &[b, gh, patch, gw, patch])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4])?;
    tape.reshape(r, &[b, gh * gw, patch * patch])
}

/// Inverse of [`patchify`] for a square grid.
pub(crate) fn unpatchify<T: Scalar>(tape: &mut Tape<T>, x: Var, patch: usize, size: usize) -> Result<Var> {
    let b = tape.shape(x)[0];
    let g = size / patch;
    let r = tape.reshape(x, &[b, g, g, patch, patch])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4])?;
    tape.reshape(r, &[b, size, size, 1])
}

/// Fixed 2-D sine-cosine position table `[g*g, d]`; `d` must be a multiple of 4.
pub(crate) fn sincos_2d(grid: usize, d: usize) -> Array {
    let quarter = d / 4;
    let mut data = Vec::with_capacity(grid * grid * d);
    for r in 0..grid {
        for c in 0..grid {
            for pos in [r as f64, c as f64] {
                for i in 0..quarter {
                    let w = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
                    data.push((pos * w).sin() as f32);
                }
                for i in 0..quarter {
                    let w = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
                    data.push((pos * w).cos() as f32);
                }
            }
            data.resize(data.len() + (d - 4 * quarter), 0.0);
        }
    }
    Array::new(&[grid * grid, d], data).expect("table extent")
}

/// Sinusoidal embedding `[B, dim]` of `scale * t`.
pub(crate) fn timestep_embedding<T: Scalar>(t: &[f32], dim: usize, scale: f64) -> Array<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let arg = ti as f64 * scale;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((arg * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((arg * freq).sin()));
        }
        data.resize(data.len() + (dim - 2 * half), T::zero());
    }
    Array::new(&[t.len(), dim], data).expect("embedding extent")
}

/// Multi-head self-attention on `x[B, N, d]` with projections `{name}.{q,k,v,o}`.
///
/// Returns the projected output `[B, N, d]` and the post-softmax maps
/// `[B, M, N, N]`.
pub(crate) fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    name: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let (bs, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, which: &str| -> Result<Var> {
        let y = linear(tape, b, &format!("{name}.{which}"), x)?;
        let y = tape.reshape(y, &[bs, n, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let scores = tape.matmul_t(q, k, false, true)?;
    let scores = tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
    let attn = tape.softmax_lastdim(scores)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[bs, n, d])?;
    Ok((linear(tape, b, &format!("{name}.o"), out)?, attn))
}

pub(crate) fn init_attention(p: &mut ParamSet, rng: &mut Rng, name: &str, d: usize) -> Result<()> {
    for which in ["q", "k", "v", "o"] {
        init_linear(p, rng, &format!("{name}.{which}"), d, d)?;
    }
    Ok(())
}

/// Two-layer SiLU feed-forward `{name}.fc1`, `{name}.fc2`.
pub(crate) fn mlp<T: Scalar>(tape: &mut Tape<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, b, &format!("{name}.fc1"), x)?;
    let h = tape.silu(h)?;
    linear(tape, b, &format!("{name}.fc2"), h)
}

pub(crate) fn init_mlp(p: &mut ParamSet, rng: &mut Rng, name: &str, d: usize, hidden: usize) -> Result<()> {
    init_linear(p, rng, &format!("{name}.fc1"), d, hidden)?;
    init_linear(p, rng, &format!("{name}.fc2"), hidden, d)
}

/// `x * (1 + scale) + shift` with per-sample `shift, scale: [B, d]`.
pub(crate) fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let scale = tape.broadcast_axis1(scale, n)?;
    let scale = tape.add_scalar(scale, T::one())?;
    let shift = tape.broadcast_axis1(shift, n)?;
    let y = tape.mul(x, scale)?;
    tape.add(y, shift)
}

/// `x + gate * y` with a per-sample `gate: [B, d]`.
pub(crate) fn gated_residual<T: Scalar>(tape: &mut Tape<T>, x: Var, gate: Var, y: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let gate = tape.broadcast_axis1(gate, n)?;
    let gy = tape.mul(gate, y)?;
    tape.add(x, gy)
}

/// Post-softmax map of head `m` from a `[B, M, N, N]` attention tensor.
pub fn head_map(attn: &Array, m: usize) -> Result<Array> {
    let s = attn.shape();
    if s.len() != 4 || m >= s[1] {
        return Err(shape_err!("head {m} of attention tensor {s:?}"));
    }
    let (b, heads, nn) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(b * nn);
    for bi in 0..b {
        let start = (bi * heads + m) * nn;
        data.extend_from_slice(&attn.data()[start..start + nn]);
    }
    Array::new(&[b, s[2], s[3]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trips() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(Array::from_fn(&[2, 8, 8, 1], |i| i as f32));
        let p = patchify(&mut tape, x, 4).unwrap();
        assert_eq!(tape.shape(p), &[2, 4, 16]);
        // Token 1 of image 0 is the top-right patch: its first pixel is (0, 4).
        assert_eq!(tape.value(p).data()[16], 4.0);
        let back = unpatchify(&mut tape, p, 4, 8).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn sincos_rows_are_distinct() {
        let t = sincos_2d(4, 16);
        let rows: Vec<&[f32]> = t.rows().collect();
        for i in 0..rows.len() {
            for j in 0..i {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn head_map_selects_head() {
        let a = Array::from_fn(&[2, 3, 2, 2], |i| i as f32);
        let h = head_map(&a, 1).unwrap();
        assert_eq!(h.shape(), &[2, 2, 2]);
        assert_eq!(h.data(), &[4.0, 5.0, 6.0, 7.0, 16.0, 17.0, 18.0, 19.0]);
    }
}
