use proptest::prelude::{prop, prop_assert, prop_assume, proptest};

use super::*;
use crate::error::Error;

fn arr(shape: &[usize], data: &[f32]) -> Array {
    Array::new(shape, data.to_vec()).unwrap()
}

fn arr64(shape: &[usize], data: &[f64]) -> Array<f64> {
    Array::new(shape, data.to_vec()).unwrap()
}

type Tape64 = Tape<f64>;

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_dot() {
    let mut t: Tape = Tape::new();
    let eye = t.constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = t.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ii = t.matmul(eye, eye).unwrap();
    assert_eq!(t.value(ii).data(), &[1.0, 0.0, 0.0, 1.0]);
    let mi = t.matmul(m, eye).unwrap();
    assert_eq!(t.value(mi).data(), &[1.0, 2.0, 3.0, 4.0]);
    let row = t.constant(arr(&[1, 2], &[1.0, 2.0]));
    let col = t.constant(arr(&[2, 1], &[3.0, 4.0]));
    let dot = t.matmul(row, col).unwrap();
    assert_eq!(t.value(dot).data(), &[11.0]);
}

#[test]
fn matmul_shape_errors() {
    let mut t: Tape = Tape::new();
    let a = t.constant(Array::zeros(&[2, 3]));
    let b = t.constant(Array::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    let c = t.constant(Array::zeros(&[2, 3, 4]));
    let d = t.constant(Array::zeros(&[3, 4, 5]));
    assert!(matches!(t.matmul(c, d), Err(Error::Shape(_))));
}

#[test]
fn transposed_matmul_matches_explicit_transpose() {
    let mut rng = Rng::new(1);
    let mut t: Tape = Tape::new();
    let a = t.constant(rng.normal_array(&[3, 4, 5]));
    let b = t.constant(rng.normal_array(&[3, 6, 5]));
    let direct = t.matmul_t(a, b, false, true).unwrap();
    let bt = t.transpose_last2(b).unwrap();
    let explicit = t.matmul(a, bt).unwrap();
    assert!(t.value(direct).max_abs_diff(t.value(explicit)) < 1e-5);
}

#[test]
fn softmax_examples() {
    let mut t: Tape = Tape::new();
    let x = t.constant(arr(&[3, 2], &[0.0, 0.0, std::f32::consts::LN_2, 0.0, 1000.0, 0.0]));
    let y = t.softmax_lastdim(x).unwrap();
    let v = t.value(y).data();
    assert!(close(&v[0..2], &[0.5, 0.5], 1e-7));
    assert!(close(&v[2..4], &[2.0 / 3.0, 1.0 / 3.0], 1e-6));
    assert!(v[4] > 0.999_999 && v[5] >= 0.0 && v[5] < 1e-6);
}

#[test]
fn softmax_empty_axis_rejected() {
    let mut t: Tape = Tape::new();
    let x = t.constant(Array::zeros(&[2, 0]));
    assert!(t.softmax_lastdim(x).is_err());
}

#[test]
fn cosine_examples() {
    let mut t: Tape = Tape::new();
    let a = t.constant(arr(&[3, 2], &[3.0, 4.0, 1.0, 0.0, 1.0, 1.0]));
    let b = t.constant(arr(&[3, 2], &[3.0, 4.0, 0.0, 1.0, 1.0, 0.0]));
    let s = t.cosine_sim_lastdim(a, b, 1e-8).unwrap();
    assert!(close(t.value(s).data(), &[1.0, 0.0, std::f32::consts::FRAC_1_SQRT_2], 1e-5));
}

#[test]
fn cosine_zero_vector_is_finite() {
    let mut t: Tape = Tape::new();
    let a = t.leaf(Array::zeros(&[1, 3]));
    let b = t.constant(arr(&[1, 3], &[1.0, 2.0, 3.0]));
    let s = t.cosine_sim_lastdim(a, b, 1e-8).unwrap();
    assert_eq!(t.value(s).data(), &[0.0]);
    let r = t.sum(s).unwrap();
    t.backward(r).unwrap();
    assert!(t.grad(a).is_finite());
}

#[test]
fn elementwise_examples() {
    let mut t: Tape = Tape::new();
    let z = t.constant(Array::zeros(&[1]));
    let s = t.silu(z).unwrap();
    assert_eq!(t.value(s).data(), &[0.0]);
    let c = t.constant(Array::full(&[4], 2.5));
    let ln = t.layer_norm(c, 1e-6).unwrap();
    assert_eq!(t.value(ln).data(), &[0.0; 4]);
    let x = t.constant(arr(&[3], &[1.0, 2.0, 3.0]));
    let m = t.mean(x).unwrap();
    assert_eq!(t.value(m).item(), 2.0);
}

#[test]
fn backward_sum_gives_ones() {
    let mut t: Tape = Tape::new();
    let x = t.leaf(arr(&[3], &[1.0, -2.0, 5.0]));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_product_swaps_factors() {
    let mut t: Tape = Tape::new();
    let x = t.leaf(Array::scalar(3.0));
    let y = t.leaf(Array::scalar(-7.0));
    let p = t.mul(x, y).unwrap();
    t.backward(p).unwrap();
    assert_eq!(t.grad(x).item(), -7.0);
    assert_eq!(t.grad(y).item(), 3.0);
}

#[test]
fn backward_contract_errors() {
    let mut t: Tape = Tape::new();
    let x = t.leaf(Array::ones(&[2]));
    let y = t.scale(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut t: Tape = Tape::new();
    let x = t.constant(Array::full(&[1], f32::MAX));
    assert!(matches!(t.scale(x, 10.0), Err(Error::Numeric(_))));
}

#[test]
fn finite_diff_examples() {
    let x = arr(&[2], &[1.0, 2.0]);
    let sq = |t: &mut Tape, v: Var| {
        let s = t.square(v)?;
        t.sum(s)
    };
    assert!(finite_diff_check(sq, &x, FD_STEP).unwrap() <= 1e-3);
    let sq64 = |t: &mut Tape64, v: Var| {
        let s = t.square(v)?;
        t.sum(s)
    };
    assert!(finite_diff_check(sq64, &arr64(&[2], &[1.0, 2.0]), FD_STEP).unwrap() <= 1e-9);
    let constant = |t: &mut Tape, v: Var| {
        let z = t.scale(v, 0.0)?;
        let s = t.sum(z)?;
        t.add_scalar(s, 4.0)
    };
    assert!(finite_diff_check(constant, &x, FD_STEP).unwrap() <= 1e-6);
    assert!(matches!(finite_diff_check(sq, &x, 0.0), Err(Error::Domain(_))));
}

#[test]
fn softmax_cross_entropy_composite_matches_fd() {
    let mut rng = Rng::new(5);
    let x = rng.normal_array(&[3, 5]).cast::<f64>();
    let target = Array::from_fn(&[3, 5], |i| if i % 5 == 1 { 0.7 } else { 0.075 });
    let f = |t: &mut Tape64, v: Var| {
        let p = t.softmax_lastdim(v)?;
        t.soft_cross_entropy(p, &target, 1e-12)
    };
    assert!(finite_diff_check(f, &x, FD_STEP).unwrap() <= 1e-3);
}

#[test]
fn single_precision_check_is_noise_limited_but_close() {
    // Same composite at f32: rounding of the function values, not the
    // backward rules, bounds the agreement.
    let x = Rng::new(5).normal_array(&[3, 5]);
    let target: Array = Array::from_fn(&[3, 5], |i| if i % 5 == 1 { 0.7 } else { 0.075 });
    let f = |t: &mut Tape, v: Var| {
        let p = t.softmax_lastdim(v)?;
        t.soft_cross_entropy(p, &target, 1e-12)
    };
    assert!(finite_diff_check(f, &x, FD_STEP).unwrap() <= 0.1);
}

/// Scalarise an op's output with fixed random weights so every output
/// element influences the checked gradient. The output at the base point is
/// subtracted first so the scalar stays near zero.
fn weighted<F>(op: F, base: &Array<f64>, out_len: usize, seed: u64) -> impl Fn(&mut Tape64, Var) -> crate::Result<Var>
where
    F: Fn(&mut Tape64, Var) -> crate::Result<Var>,
{
    let w = Rng::new(seed ^ 0xABCD).normal_array(&[out_len]).cast::<f64>();
    let y0 = {
        let mut t = Tape64::new();
        let v = t.constant(base.clone());
        let y = op(&mut t, v).expect("op evaluates at the base point");
        t.value(y).clone().reshape(&[out_len]).expect("declared output length")
    };
    move |t: &mut Tape64, v: Var| {
        let y = op(t, v)?;
        let flat = t.reshape(y, &[out_len])?;
        let offset = t.constant(y0.clone());
        let centred = t.sub(flat, offset)?;
        let wv = t.constant(w.clone());
        let p = t.mul(centred, wv)?;
        t.sum(p)
    }
}

fn check_op<F>(name: &str, shape: &[usize], out_len: impl Fn(&[usize]) -> usize, op: F)
where
    F: Fn(&mut Tape64, Var) -> crate::Result<Var> + Clone,
{
    for seed in 0..20u64 {
        let x = Rng::new(seed).normal_array(shape).cast::<f64>();
        let f = weighted(op.clone(), &x, out_len(shape), seed);
        let err = finite_diff_check(f, &x, FD_STEP).unwrap();
        assert!(err <= 1e-3, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let same = |s: &[usize]| s.iter().product::<usize>();
    check_op("silu", &[3, 4], same, |t, v| t.silu(v));
    check_op("softmax", &[2, 5], same, |t, v| t.softmax_lastdim(v));
    check_op("layer_norm", &[3, 6], same, |t, v| t.layer_norm(v, 1e-5));
    check_op("scale", &[5], same, |t, v| t.scale(v, -1.5));
    check_op("square", &[4], same, |t, v| t.square(v));
    check_op("transpose", &[2, 3, 4], same, |t, v| t.transpose_last2(v));
    check_op("permute", &[2, 3, 2, 2], same, |t, v| t.permute(v, &[0, 2, 1, 3]));
    check_op("narrow", &[2, 4, 3], |_| 2 * 2 * 3, |t, v| t.narrow(v, 1, 1, 2));
    check_op("mean_axis", &[2, 3, 4], |_| 8, |t, v| t.mean_axis(v, 1));
    check_op("broadcast", &[2, 3], |_| 2 * 4 * 3, |t, v| t.broadcast_axis1(v, 4));
    check_op("gather", &[4, 3], |_| 5 * 3, |t, v| t.gather(v, &[0, 3, 3, 1, 2]));
    check_op("mean", &[7], |_| 1, |t, v| t.mean(v));
    let other = Rng::new(99).normal_array(&[3, 4]).cast::<f64>();
    check_op("mul", &[3, 4], same, {
        let other = other.clone();
        move |t: &mut Tape64, v: Var| {
            let o = t.constant(other.clone());
            t.mul(v, o)
        }
    });
    check_op("cosine", &[3, 4], |_| 3, {
        let other = other.clone();
        move |t: &mut Tape64, v: Var| {
            let o = t.constant(other.clone());
            t.cosine_sim_lastdim(v, o, 1e-8)
        }
    });
    let w = Rng::new(98).normal_array(&[4, 5]).cast::<f64>();
    check_op("matmul_lhs", &[2, 3, 4], |_| 2 * 3 * 5, {
        let w = w.clone();
        move |t: &mut Tape64, v: Var| {
            let o = t.constant(w.clone());
            t.matmul(v, o)
        }
    });
    check_op("matmul_rhs", &[4, 5], |_| 3 * 5, |t, v| {
        let a = t.constant(Rng::new(97).normal_array(&[3, 4]).cast::<f64>());
        t.matmul(a, v)
    });
    check_op("matmul_nt_rhs", &[2, 6, 4], |_| 2 * 3 * 6, |t, v| {
        let a = t.constant(Rng::new(96).normal_array(&[2, 3, 4]).cast::<f64>());
        t.matmul_t(a, v, false, true)
    });
    check_op("matmul_tn_lhs", &[2, 4, 3], |_| 2 * 3 * 5, |t, v| {
        let b = t.constant(Rng::new(95).normal_array(&[2, 4, 5]).cast::<f64>());
        t.matmul_t(v, b, true, false)
    });
    check_op("linear_x", &[3, 4], |_| 3 * 5, {
        let w = w.clone();
        move |t: &mut Tape64, v: Var| {
            let wv = t.constant(w.clone());
            let b = t.constant(Array::full(&[5], 0.3f64));
            t.linear(v, wv, Some(b))
        }
    });
    check_op("linear_w", &[4, 5], |_| 2 * 3 * 5, |t, v| {
        let x = t.constant(Rng::new(94).normal_array(&[2, 3, 4]).cast::<f64>());
        t.linear(x, v, None)
    });
    check_op("linear_b", &[5], |_| 3 * 5, |t, v| {
        let x = t.constant(Rng::new(93).normal_array(&[3, 4]).cast::<f64>());
        let w = t.constant(Rng::new(92).normal_array(&[4, 5]).cast::<f64>());
        t.linear(x, w, Some(v))
    });
    check_op("cross_entropy_logits", &[3, 4], |_| 1, |t, v| t.cross_entropy_logits(v, &[0, 3, 1]));
}

#[test]
fn deterministic_across_runs() {
    let build = || {
        let mut rng = Rng::new(42);
        let mut t: Tape = Tape::new();
        let a = t.leaf(rng.normal_array(&[4, 8, 8]));
        let b = t.leaf(rng.normal_array(&[4, 8, 8]));
        let m = t.matmul_t(a, b, false, true).unwrap();
        let s = t.softmax_lastdim(m).unwrap();
        let r = t.mean(s).unwrap();
        t.backward(r).unwrap();
        (t.value(s).clone(), t.grad(a))
    };
    let (s1, g1) = build();
    let (s2, g2) = build();
    assert!(s1.bit_eq(&s2) && g1.bit_eq(&g2));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-1000.0f32..1000.0, 1..=32), width in 1usize..=8) {
        let rows = data.len() / width;
        prop_assume!(rows > 0);
        let x = Array::new(&[rows, width], data[..rows * width].to_vec()).unwrap();
        let mut t: Tape = Tape::new();
        let v = t.constant(x);
        let y = t.softmax_lastdim(v).unwrap();
        for row in t.value(y).rows() {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn cosine_is_scale_invariant(a in prop::collection::vec(-5.0f32..5.0, 4), b in prop::collection::vec(-5.0f32..5.0, 4)) {
        prop_assume!(a.iter().map(|v| v * v).sum::<f32>() > 1e-2);
        prop_assume!(b.iter().map(|v| v * v).sum::<f32>() > 1e-2);
        let mut t: Tape = Tape::new();
        let bv = t.constant(arr(&[4], &b));
        let av = t.constant(arr(&[4], &a));
        let base = t.cosine_sim_lastdim(av, bv, 1e-8).unwrap();
        let base = t.value(base).item();
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&base));
        for lambda in [0.5f32, 2.0, 10.0] {
            let scaled = t.scale(av, lambda).unwrap();
            let s = t.cosine_sim_lastdim(scaled, bv, 1e-8).unwrap();
            prop_assert!((t.value(s).item() - base).abs() <= 1e-6);
        }
    }
}
