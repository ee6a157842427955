use super::array::strides;
use super::{Array, Scalar};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct GemmDims {
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    shared_b: bool,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    MatMul(Var, Var, GemmDims),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, k: usize, n: usize },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Cosine { a: Var, b: Var, norm_a: Vec<T>, norm_b: Vec<T>, eps: T },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, outer: usize, len: usize, inner: usize, start: usize },
    Gather { table: Var, index: Vec<usize> },
    BroadcastAxis1 { x: Var, outer: usize, n: usize, inner: usize },
    SoftCrossEntropy { q: Var, target: Array<T>, clamp: T },
    CrossEntropyLogits { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b, _) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Silu(x) | Softmax(x) | SumAll(x) | MeanAll(x) | Reshape(x) => vec![*x],
            Linear { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            LayerNorm { x, .. } | MeanAxis { x, .. } | Permute { x, .. } | Narrow { x, .. } | BroadcastAxis1 { x, .. } => {
                vec![*x]
            }
            Cosine { a, b, .. } => vec![*a, *b],
            Gather { table, .. } => vec![*table],
            SoftCrossEntropy { q, .. } => vec![*q],
            CrossEntropyLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T: Scalar> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Values are appended in evaluation order, so reverse index order is a
/// reverse topological order. Adjoints of intermediate nodes are dropped as
/// soon as they have been propagated; only leaf adjoints survive `backward`.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    (rsc, csc): (usize, usize),
    beta: T,
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // guarantees; each slice covers the full strided extent it is read or
    // written through.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Split `shape` around `axis` into (outer, len, inner).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += gather_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= gather_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adjoint of a leaf after [`Tape::backward`]; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Array<T> {
        let shape = self.shape(v);
        match &self.grads[v.0] {
            Some(g) => Array::new(shape, g.clone()).expect("adjoint matches value shape"),
            None => Array::zeros(shape),
        }
    }

    fn push_unchecked(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> Result<Var> {
        if let Err(Error::Numeric(detail)) = value.ensure_finite("") {
            return Err(Error::Numeric(format!("{} produced a non-finite value ({detail})", op_name(&op))));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(va.shape(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(value, Op::Silu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    fn gemm_dims(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<(GemmDims, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (lead_a, mat_a) = sa.split_at(sa.len() - 2);
        let (lead_b, mat_b) = sb.split_at(sb.len() - 2);
        let shared_b = lead_b.is_empty() && !lead_a.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(shape_err!("matmul batch extents differ: {sa:?} x {sb:?}"));
        }
        let (m, k) = if trans_a { (mat_a[1], mat_a[0]) } else { (mat_a[0], mat_a[1]) };
        let (kb, n) = if trans_b { (mat_b[1], mat_b[0]) } else { (mat_b[0], mat_b[1]) };
        if k != kb {
            return Err(shape_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let groups = lead_a.iter().product();
        let mut out = lead_a.to_vec();
        out.extend([m, n]);
        Ok((GemmDims { groups, m, k, n, trans_a, trans_b, shared_b }, out))
    }

    /// Batched matrix product `a[.., m, k] x b[.., k, n]`. `b` may also be a
    /// plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with either operand read transposed in its last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (d, out_shape) = self.gemm_dims(a, b, trans_a, trans_b)?;
        let mut out = vec![T::zero(); d.groups * d.m * d.n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let sa = if d.trans_a { (1, d.m) } else { (d.k, 1) };
        let sb = if d.trans_b { (1, d.k) } else { (d.n, 1) };
        for g in 0..d.groups {
            let a_off = g * d.m * d.k;
            let b_off = if d.shared_b { 0 } else { g * d.k * d.n };
            gemm(
                d.m,
                d.k,
                d.n,
                &va[a_off..a_off + d.m * d.k],
                sa,
                &vb[b_off..b_off + d.k * d.n],
                sb,
                &mut out[g * d.m * d.n..(g + 1) * d.m * d.n],
                (d.n, 1),
                T::zero(),
            );
        }
        let value = Array::new(&out_shape, out)?;
        self.push(value, Op::MatMul(a, b, d))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(shape_err!("transpose_last2 needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    /// Affine map over the last axis: `x[.., k] . w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(shape_err!("linear: input {sx:?} with weight {sw:?}"));
        }
        let (k, n) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err!("linear: bias {:?} for output width {n}", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / k;
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), &mut out, (n, 1), T::zero());
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let value = Array::new(&out_shape, out)?;
        self.push(value, Op::Linear { x, w, b, rows, k, n })
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().last().copied().unwrap_or(0) == 0 {
            return Err(shape_err!("softmax over an empty axis"));
        }
        let mut out = Vec::with_capacity(v.len());
        for row in v.rows() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &r in row {
                let e = (r - max).exp();
                total = total + e;
                out.push(e);
            }
            let inv = T::one() / total;
            out[start..].iter_mut().for_each(|e| *e = *e * inv);
        }
        let value = Array::new(v.shape(), out)?;
        self.push(value, Op::Softmax(x))
    }

    /// Layer normalisation over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        let d = v.shape().last().copied().unwrap_or(0);
        if d == 0 {
            return Err(shape_err!("layer_norm over an empty axis"));
        }
        let mut out = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(v.len() / d);
        for row in v.rows() {
            let dn = T::lit(d as f64);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            out.extend(row.iter().map(|&r| (r - mean) * rs));
        }
        let value = Array::new(v.shape(), out)?;
        self.push(value, Op::LayerNorm { x, rstd })
    }

    /// Cosine similarity of matching last-axis vectors; each norm is clamped
    /// below by `eps`.
    pub fn cosine_sim_lastdim(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        self.same_shape(a, b, "cosine_sim_lastdim")?;
        let (va, vb) = (self.value(a), self.value(b));
        let shape = va.shape();
        if shape.is_empty() {
            return Err(shape_err!("cosine_sim_lastdim needs rank >= 1"));
        }
        let mut out = Vec::new();
        let mut norm_a = Vec::new();
        let mut norm_b = Vec::new();
        for (ra, rb) in va.rows().zip(vb.rows()) {
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            out.push(dot / (na.max(eps) * nb.max(eps)));
            norm_a.push(na);
            norm_b.push(nb);
        }
        let value = Array::new(&shape[..shape.len() - 1], out)?;
        self.push(value, Op::Cosine { a, b, norm_a, norm_b, eps })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Array::scalar(T::lit(total)), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total = v.data().iter().map(|v| v.as_f64()).sum::<f64>() / v.len() as f64;
        self.push(Array::scalar(T::lit(total)), Op::MeanAll(x))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("mean_axis {axis} on {shape:?}"));
        }
        let (outer, len, inner) = around_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &r) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + r;
                }
            }
        }
        let inv = T::one() / T::lit(len as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Array::new(&out_shape, out)?;
        self.push(value, Op::MeanAxis { x, outer, len, inner })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("permute {axes:?} is not a permutation of rank {}", shape.len()));
        }
        let (out_shape, out) = permute_data(self.value(x).data(), &shape, axes);
        let value = Array::new(&out_shape, out)?;
        self.push(value, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("narrow axis {axis} [{start}, {}) on {shape:?}", start + len));
        }
        let (outer, full, inner) = around_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Array::new(&out_shape, out)?;
        self.push(value, Op::Narrow { x, outer, len: full, inner, start })
    }

    /// Rows of `table[V, d]` selected by `index`, giving `[index.len(), d]`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(shape_err!("gather needs a 2-d table, got {shape:?}"));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("gather index {bad} out of range for {rows} rows"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Array::new(&[index.len(), d], out)?;
        self.push(value, Op::Gather { table, index: index.to_vec() })
    }

    /// Repeat `x[b, ..]` along a new axis 1 of extent `n`.
    pub fn broadcast_axis1(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(shape_err!("broadcast_axis1 needs rank >= 1"));
        }
        let outer = shape[0];
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = vec![outer, n];
        out_shape.extend_from_slice(&shape[1..]);
        let value = Array::new(&out_shape, out)?;
        self.push(value, Op::BroadcastAxis1 { x, outer, n, inner })
    }

    /// Mean over rows of `-sum_j target_j * ln(max(q_j, clamp))`, with the
    /// target distribution held constant.
    pub fn soft_cross_entropy(&mut self, q: Var, target: &Array<T>, clamp: T) -> Result<Var> {
        let vq = self.value(q);
        if vq.shape() != target.shape() {
            return Err(shape_err!("cross-entropy: prediction {:?} vs target {:?}", vq.shape(), target.shape()));
        }
        let rows = vq.rows().len().max(1);
        let mut total = 0.0f64;
        for (rq, rp) in vq.rows().zip(target.rows()) {
            let row: T = rq.iter().zip(rp).map(|(&qj, &pj)| -pj * qj.max(clamp).ln()).sum();
            total += row.as_f64();
        }
        let value = Array::scalar(T::lit(total / rows as f64));
        self.push(value, Op::SoftCrossEntropy { q, target: target.clone(), clamp })
    }

    /// Mean negative log-likelihood of integer labels under `softmax(logits)`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let shape = v.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err!("cross_entropy_logits: logits {shape:?} for {} labels", labels.len()));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err!("label {bad} out of range for {c} classes"));
        }
        let mut probs = Vec::with_capacity(v.len());
        let mut total = 0.0f64;
        for (row, &label) in v.rows().zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&r| (r - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[label]).as_f64();
            probs.extend(row.iter().map(|&r| (r - lse).exp()));
        }
        let value = Array::scalar(T::lit(total / labels.len() as f64));
        self.push(value, Op::CrossEntropyLogits { logits, labels: labels.to_vec(), probs })
    }

    /// Propagate adjoints from a scalar root to every reachable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape; adjoints would double-count".into()));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", self.shape(root))));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        // Accumulate into parent `p` if it tracks gradients.
        let mut acc = |p: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[p.0].requires_grad {
                let slot = grads[p.0].get_or_insert_with(|| vec![T::zero(); nodes[p.0].value.len()]);
                f(slot);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s - g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s = *s + g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s = *s + g * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + *c * g)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g)),
            Op::Silu(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((s, &g), &v) in s.iter_mut().zip(g).zip(vx) {
                        let sig = T::one() / (T::one() + (-v).exp());
                        *s = *s + g * sig * (T::one() + v * (T::one() - sig));
                    }
                });
            }
            Op::MatMul(a, b, d) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (m, k, n) = (d.m, d.k, d.n);
                // Strides of op(a) (m x k) and op(b) (k x n) over their storage.
                let sa = if d.trans_a { (1, m) } else { (k, 1) };
                let sb = if d.trans_b { (1, k) } else { (n, 1) };
                acc(*a, &mut |s| {
                    for grp in 0..d.groups {
                        let b_off = if d.shared_b { 0 } else { grp * k * n };
                        // d op(a) = g . op(b)^T, written through op(a)'s strides.
                        gemm(
                            m,
                            n,
                            k,
                            &g[grp * m * n..(grp + 1) * m * n],
                            (n, 1),
                            &vb[b_off..b_off + k * n],
                            (sb.1, sb.0),
                            &mut s[grp * m * k..(grp + 1) * m * k],
                            sa,
                            T::one(),
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for grp in 0..d.groups {
                        let b_off = if d.shared_b { 0 } else { grp * k * n };
                        // d op(b) = op(a)^T . g
                        gemm(
                            k,
                            m,
                            n,
                            &va[grp * m * k..(grp + 1) * m * k],
                            (sa.1, sa.0),
                            &g[grp * m * n..(grp + 1) * m * n],
                            (n, 1),
                            &mut s[b_off..b_off + k * n],
                            sb,
                            T::one(),
                        );
                    }
                });
            }
            Op::Linear { x, w, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                acc(*x, &mut |s| gemm(rows, n, k, g, (n, 1), vw, (1, n), s, (k, 1), T::one()));
                acc(*w, &mut |s| gemm(k, rows, n, vx, (1, k), g, (n, 1), s, (n, 1), T::one()));
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for row in g.chunks_exact(n) {
                            s.iter_mut().zip(row).for_each(|(s, &g)| *s = *s + g);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.rows()) {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((s, &g), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s = *s + y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let n = *out.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (((srow, grow), yrow), rs) in
                        s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.rows()).zip(rstd)
                    {
                        let nn = T::lit(n as f64);
                        let mean_g = grow.iter().copied().sum::<T>() / nn;
                        let mean_gy = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum::<T>() / nn;
                        for ((s, &g), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s = *s + *rs * (g - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::Cosine { a, b, norm_a, norm_b, eps } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let d = *va.shape().last().unwrap();
                let cos = out.data();
                // d cos / d u = v / (|u|' |v|') - cos * u / |u|^2  (last term only when |u| > eps)
                let mut side = |u: Var, vu: &Array<T>, vv: &Array<T>, nu: &[T], nv: &[T]| {
                    acc(u, &mut |s| {
                        for (r, (srow, (urow, vrow))) in
                            s.chunks_exact_mut(d).zip(vu.rows().zip(vv.rows())).enumerate()
                        {
                            let denom = nu[r].max(*eps) * nv[r].max(*eps);
                            let self_term = if nu[r] > *eps { cos[r] / (nu[r] * nu[r]) } else { T::zero() };
                            for ((s, &uj), &vj) in srow.iter_mut().zip(urow).zip(vrow) {
                                *s = *s + g[r] * (vj / denom - self_term * uj);
                            }
                        }
                    });
                };
                side(*a, va, vb, norm_a, norm_b);
                side(*b, vb, va, norm_b, norm_a);
            }
            Op::SumAll(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s = *s + g[0])),
            Op::MeanAll(x) => {
                let scale = g[0] / T::lit(nodes[x.0].value.len() as f64);
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s = *s + scale));
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let inv = T::one() / T::lit(len as f64);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            s[base..base + inner].iter_mut().zip(grow).for_each(|(s, &g)| *s = *s + g * inv);
                        }
                    }
                });
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(g, out.shape(), &inverse);
                acc(*x, &mut |s| s.iter_mut().zip(&back).for_each(|(s, &g)| *s = *s + g));
            }
            Op::Narrow { x, outer, len, inner, start } => {
                let width = out.shape().iter().product::<usize>() / outer.max(&1);
                acc(*x, &mut |s| {
                    for o in 0..*outer {
                        let base = (o * len + start) * inner;
                        s[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]).for_each(|(s, &g)| *s = *s + g);
                    }
                });
            }
            Op::Gather { table, index } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |s| {
                    for (r, &i) in index.iter().enumerate() {
                        s[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(s, &g)| *s = *s + g);
                    }
                });
            }
            Op::BroadcastAxis1 { x, outer, n, inner } => {
                acc(*x, &mut |s| {
                    for o in 0..*outer {
                        for j in 0..*n {
                            let base = (o * n + j) * inner;
                            s[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(&g[base..base + inner])
                                .for_each(|(s, &g)| *s = *s + g);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy { q, target, clamp } => {
                let vq = nodes[q.0].value.data();
                let rows = nodes[q.0].value.rows().len().max(1);
                let scale = g[0] / T::lit(rows as f64);
                acc(*q, &mut |s| {
                    for ((s, &qj), &pj) in s.iter_mut().zip(vq).zip(target.data()) {
                        if qj > *clamp {
                            *s = *s - scale * pj / qj;
                        }
                    }
                });
            }
            Op::CrossEntropyLogits { logits, labels, probs } => {
                let c = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                acc(*logits, &mut |s| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            s[r * c + j] = s[r * c + j] + scale * (probs[r * c + j] - target);
                        }
                    }
                });
            }
        }
    }
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Silu(..) => "silu",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Cosine { .. } => "cosine_sim",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::MeanAxis { .. } => "mean_axis",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Narrow { .. } => "narrow",
        Op::Gather { .. } => "gather",
        Op::BroadcastAxis1 { .. } => "broadcast_axis1",
        Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
    }
}
