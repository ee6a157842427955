//! Two-sample distances between image sets and alignment-progress metrics.
//!
//! ```text
//! cargo run --release --example metrics
//! ```

use holalign::evalkit::{energy_distance, mmd_rbf, relational_cosine, Bandwidths};
use holalign::ndgrad::{Array, Rng};
use holalign::synthdata::{self, gen, ShapeConfig};

fn stack(seed: u64, n: usize, keep: impl Fn(usize) -> bool) -> holalign::Result<Array> {
    let samples = gen(seed, n, ShapeConfig::default())?;
    let picked: Vec<_> = samples.iter().filter(|s| keep(s.label)).collect();
    Ok(synthdata::batch(&picked)?.0)
}

fn main() -> holalign::Result<()> {
    let reference = stack(0, 400, |_| true)?;
    let same = stack(1, 400, |_| true)?;
    let half = stack(2, 800, |l| l < 4)?;
    let noise = Rng::new(3).uniform_array(reference.shape(), -1.0, 1.0);
    for (name, set) in [("fresh draw, all classes", &same), ("only four classes", &half), ("uniform noise", &noise)] {
        println!(
            "{name:>24}: mmd {:.5}  energy {:.4}",
            mmd_rbf(&reference, set, &Bandwidths::default())?,
            energy_distance(&reference, set)?
        );
    }

    // Token relations are basis-free: a rotated, wider copy still scores 1.
    let mut rng = Rng::new(4);
    let a = rng.normal_array(&[2, 16, 8]);
    let wider = Array::from_fn(&[2, 16, 12], |i| if i % 12 < 8 { -a.data()[i / 12 * 8 + i % 12] } else { 0.0 });
    println!("relational cosine of a padded, negated copy: {:.4}", relational_cosine(&a, &wider)?);
    println!("relational cosine of unrelated features:     {:.4}", relational_cosine(&a, &rng.normal_array(&[2, 16, 12]))?);
    Ok(())
}
