use super::{Array, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Compare the tape's gradient of a scalar function against central
/// differences.
///
/// Returns the largest `|g_ad - g_fd| / max(1e-4, |g_fd|)` over all elements
/// of `x`. Both the tape gradient and the differences are evaluated at the
/// precision of `T`; checking at `f64` isolates mistakes in backward rules
/// from single-precision rounding.
pub fn finite_diff_check<T, F>(f: F, x: &Array<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape.grad(leaf);

    let eval = |probe: Array<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe);
        let root = f(&mut tape, leaf)?;
        let v = tape.value(root).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v:?} during finite differencing")));
        }
        Ok(v.as_f64())
    };

    let step = T::lit(h);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        // Use the realised step, which differs from `h` after rounding.
        let span = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        let fd = (eval(plus)? - eval(minus)?) / span;
        let ad = analytic.data()[i].as_f64();
        let rel = (ad - fd).abs() / fd.abs().max(1e-4);
        worst = worst.max(rel);
    }
    Ok(worst)
}
