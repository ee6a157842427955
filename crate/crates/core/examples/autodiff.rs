//! Reverse-mode gradients on the tape, checked against central differences.
//!
//! ```text
//! cargo run --release --example autodiff
//! ```

use holalign::ndgrad::{finite_diff_check, Array, Rng, Tape, FD_STEP};

fn main() -> holalign::Result<()> {
    // loss = mean(silu(x W)^2) for a random 3×4 input and 4×2 weight.
    let w = Rng::new(1).normal_array(&[4, 2]);
    let x = Rng::new(2).normal_array(&[3, 4]);

    let mut tape: Tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let h = tape.matmul(xv, wv)?;
    let a = tape.silu(h)?;
    let sq = tape.square(a)?;
    let loss = tape.mean(sq)?;
    tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("dloss/dW = {:?}", tape.grad(wv).data());

    // The same graph in double precision, against finite differences.
    let w64 = w.cast::<f64>();
    let err = finite_diff_check(
        |t: &mut Tape<f64>, x| {
            let wv = t.constant(w64.clone());
            let h = t.matmul(x, wv)?;
            let a = t.silu(h)?;
            let sq = t.square(a)?;
            t.mean(sq)
        },
        &x.cast::<f64>(),
        FD_STEP,
    )?;
    println!("max relative error against central differences: {err:.2e}");
    let _: Array = tape.grad(xv);
    Ok(())
}
