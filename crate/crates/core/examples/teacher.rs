//! Pretrain the frozen encoder on shape classification and inspect what it
//! exports: final patch embeddings and per-block attention maps.
//!
//! ```text
//! cargo run --release --example teacher -- 300
//! ```

use holalign::synthdata::{self, gen, split, ShapeConfig};
use holalign::teacher::{pretrain_teacher, PretrainConfig, TeacherConfig};

fn main() -> holalign::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let (train, hold) = split(gen(0, 4000, ShapeConfig::default())?, 0.1)?;
    let cfg = TeacherConfig::desk();
    let (teacher, report) = pretrain_teacher(cfg.clone(), &train, &hold, &PretrainConfig { steps, ..Default::default() })?;
    println!("{steps} steps: loss {:.3} -> {:.3}", report.losses[0], report.losses[report.losses.len() - 1]);
    println!("holdout accuracy {:.3} (frozen: {})", report.holdout_accuracy, teacher.is_frozen());

    let (x, _) = synthdata::batch(&hold.iter().take(4).collect::<Vec<_>>())?;
    let out = teacher.encode(&x)?;
    println!("y {:?}; {} attention maps of shape {:?}", out.y.shape(), out.attn.len(), out.attn[0].shape());
    println!("checksum {}", teacher.checksum());
    Ok(())
}
