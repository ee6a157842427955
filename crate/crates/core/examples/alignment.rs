//! Feature alignment (token cosine through a projector) and attention
//! alignment (cross-entropy against teacher maps) on small hand inputs.
//!
//! ```text
//! cargo run --release --example alignment
//! ```

use holalign::align::{atta_loss, repa_from_features, AlignConfig};
use holalign::ndgrad::{Array, Tape};
use holalign::student::ActivationTrace;
use holalign::teacher::TeacherOutputs;

fn main() -> holalign::Result<()> {
    // Two tokens: the first at 45° to its target, the second orthogonal.
    let y = Array::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let mut tape: Tape = Tape::new();
    let z = tape.leaf(Array::new(&[1, 2, 2], vec![s, s, 1.0, 0.0])?);
    let repa = repa_from_features(&mut tape, z, &y)?;
    tape.backward(repa)?;
    println!("feature alignment loss {:.5} (-mean cosine)", tape.value(repa).item());
    println!("gradient on the student tokens {:?}", tape.grad(z).data());

    // One query row: teacher attends [0.8, 0.2], student [0.6, 0.4].
    let teacher = TeacherOutputs { y: Array::zeros(&[1, 1, 1]), attn: vec![Array::new(&[1, 1, 1, 2], vec![0.8, 0.2])?] };
    let cfg = AlignConfig { lambda_repa: 0.5, lambda_atta: 0.5, feature_depth: 0, pairs: vec![(0, 0)], aligned_heads: 1 };
    for student in [[0.6f32, 0.4], [0.8, 0.2], [0.5, 0.5]] {
        let mut tape: Tape = Tape::new();
        let trace = ActivationTrace { hidden: vec![], attn: vec![tape.leaf(Array::new(&[1, 1, 1, 2], student.to_vec())?)] };
        let l = atta_loss(&mut tape, &trace, &teacher, &cfg)?;
        println!("attention alignment, student row {student:?}: {:.5}", tape.value(l).item());
    }
    println!("teacher row entropy (the floor): {:.5}", -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln()));
    Ok(())
}
