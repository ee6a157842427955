//! Generate the procedural shape dataset and write a labelled contact sheet.
//!
//! ```text
//! cargo run --release --example shapes -- shapes.pgm
//! ```

use holalign::synthdata::{gen, split, ShapeConfig, CLASS_NAMES};

fn main() -> holalign::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes.pgm".into());
    let cfg = ShapeConfig::default();
    let samples = gen(0, 64, cfg)?;
    let (train, hold) = split(samples.clone(), 0.1)?;
    println!("{} samples: {} train, {} holdout", samples.len(), train.len(), hold.len());

    // Eight rows (one per class) of eight examples, one pixel apart.
    let s = cfg.size;
    let side = 8 * (s + 1) + 1;
    let mut px = vec![0u8; side * side];
    for (i, sample) in samples.iter().enumerate() {
        let (row, col) = (sample.label, i / cfg.classes);
        for y in 0..s {
            for x in 0..s {
                let v = sample.image.data()[y * s + x];
                px[(1 + row * (s + 1) + y) * side + 1 + col * (s + 1) + x] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
    }
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(px);
    std::fs::write(&out, bytes)?;
    println!("rows, top to bottom: {}", CLASS_NAMES.join(", "));
    println!("wrote {out}");
    Ok(())
}
