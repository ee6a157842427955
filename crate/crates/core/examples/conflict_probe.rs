//! Cosine between the denoising gradient and each alignment gradient at
//! several timesteps, for one block of a freshly perturbed student.
//!
//! ```text
//! cargo run --release --example conflict_probe
//! ```

use holalign::align::{AlignConfig, Projector};
use holalign::ndgrad::Rng;
use holalign::schedule::{probe_conflict, ConflictProbe, ProbeLoss, DEFAULT_T_GRID};
use holalign::student::{Student, StudentConfig};
use holalign::synthdata::{self, gen, ShapeConfig};
use holalign::teacher::{Teacher, TeacherConfig};

fn main() -> holalign::Result<()> {
    let mut rng = Rng::new(0);
    let s_cfg = StudentConfig::desk();
    let mut student = Student::init(s_cfg.clone(), &mut rng)?;
    // Move off the zero-initialised gates so every block has gradient.
    for (_, a) in student.params.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v += 0.02 * rng.normal());
    }
    let proj = Projector::init(s_cfg.width, TeacherConfig::desk().width, &mut rng)?.params;
    let mut teacher = Teacher::init(TeacherConfig::desk(), &mut rng)?;
    teacher.freeze();
    let samples = gen(1, 32, ShapeConfig::default())?;
    let (images, labels) = synthdata::batch(&samples.iter().collect::<Vec<_>>())?;
    let outs = teacher.encode(&images)?;
    let cfg = AlignConfig { lambda_repa: 0.5, lambda_atta: 0.5, feature_depth: 2, pairs: vec![(1, 4), (2, 5)], aligned_heads: 4 };

    print!("{:>9}", "loss");
    DEFAULT_T_GRID.iter().for_each(|t| print!(" {:>7}", format!("t={t}")));
    println!();
    for kind in [ProbeLoss::Repa, ProbeLoss::Atta, ProbeLoss::Holistic] {
        let probe = ConflictProbe::new(images.clone(), labels.clone(), outs.clone(), 2, DEFAULT_T_GRID.to_vec(), 0, kind)?;
        let rhos = probe_conflict(&student, &proj, &probe, &cfg)?;
        print!("{:>9}", kind.as_str());
        rhos.iter().for_each(|(_, r)| print!(" {r:>7.3}"));
        println!();
    }
    Ok(())
}
