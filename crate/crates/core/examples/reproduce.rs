//! Train (or re-read) the multi-seed desk comparison and print how it
//! compares against the expected trends.
//!
//! Runs are cached under `target/desk-lab` (override with `HOLALIGN_LAB`),
//! so an interrupted invocation resumes where it stopped.
//!
//! ```text
//! cargo run --release --example reproduce
//! ```

use std::path::PathBuf;
use std::time::Instant;

use holalign::experiments::{DeskSuite, Lab};

fn main() -> holalign::Result<()> {
    let root = std::env::var_os("HOLALIGN_LAB")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/desk-lab"));
    let lab = Lab::new(root);
    let suite = DeskSuite::default();
    let teacher = lab.teacher(&suite.base)?;
    println!("teacher holdout accuracy {:.3}", teacher.holdout_accuracy);
    let start = Instant::now();
    let logs = suite.collect(&lab, &mut |label, seed| {
        println!("[{:>7.0}s] {label} seed {seed}", start.elapsed().as_secs_f64());
    })?;
    for check in suite.checks(&logs)? {
        println!("{} {:>2} {}: {}", if check.pass { "PASS" } else { "FAIL" }, check.id, check.name, check.detail);
    }
    Ok(())
}
