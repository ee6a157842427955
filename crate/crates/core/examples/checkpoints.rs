//! Run configuration files and binary checkpoints: parse, hash, save,
//! reload, and verify the round trip is exact.
//!
//! ```text
//! cargo run --release --example checkpoints
//! ```

use holalign::checkpoint::Checkpoint;
use holalign::config::RunConfig;
use holalign::trainer::{load_checkpoint, save_checkpoint, RunState};

fn main() -> holalign::Result<()> {
    let text = "[train]\nsteps = 2000\nseed = 3\n\n[schedule]\ntau = 500\n";
    let cfg: RunConfig = text.parse()?;
    println!("parsed: steps {}, seed {}, tau {:?}", cfg.train.steps, cfg.train.seed, cfg.schedule.tau);
    println!("canonical form hashes to {}", cfg.hash());
    let again: RunConfig = cfg.to_text().parse()?;
    println!("canonical text is a fixed point: {}", again.to_text() == cfg.to_text());
    match "[train]\nstepz = 1\n".parse::<RunConfig>() {
        Err(e) => println!("unknown keys are rejected: {e}"),
        Ok(_) => unreachable!(),
    }

    let state = RunState::init(&cfg)?;
    let dir = std::env::temp_dir().join(format!("holalign-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("state.hste");
    save_checkpoint(&state, &cfg, &path)?;
    let bytes = std::fs::read(&path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    println!("{} bytes, {} tensors, meta kind {}", bytes.len(), ck.tensors.len(), ck.meta["kind"]);
    let (back, back_cfg) = load_checkpoint(&path)?;
    println!("state restored exactly: {}", back == state && back_cfg == cfg);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
