//! The Euler ODE and Euler–Maruyama SDE samplers on an exact Gaussian
//! velocity field, where the right answer is known in closed form.
//!
//! ```text
//! cargo run --release --example sampling
//! ```

use holalign::interpolant::{sample_ode, sample_sde, Diffusion, GaussianField, SamplerConfig, SamplerKind};
use holalign::ndgrad::Rng;

fn main() -> holalign::Result<()> {
    let field = GaussianField { mu: 0.3, sigma: 0.5 };
    let (n, size) = (256, 2);
    println!("data: N({}, {}²); exact flow carries noise e to mu + sigma·e", field.mu, field.sigma);
    println!("{:>5} {:>12}", "nfes", "ODE error");
    for nfes in [4, 8, 16, 32, 64] {
        let cfg = SamplerConfig { nfes, kind: SamplerKind::Ode, seed: 1, ..Default::default() };
        let out = sample_ode(&field, &cfg, n, size)?;
        let start = Rng::new(cfg.seed).split("start").normal_array(&[n, size, size, 1]);
        let err = out.data().iter().zip(start.data()).map(|(&o, &e)| (o - field.flow_endpoint(e)).abs() as f64).sum::<f64>() / out.len() as f64;
        println!("{nfes:>5} {err:>12.3e}");
    }

    let stats = |x: &holalign::ndgrad::Array| {
        let m = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        let v = x.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / x.len() as f64;
        (m, v.sqrt())
    };
    let sde = SamplerConfig { nfes: 100, kind: SamplerKind::Sde, seed: 2, ..Default::default() };
    let (m, s) = stats(&sample_sde(&field, &sde, 2048, size)?);
    println!("SDE samples: mean {m:.3}, std {s:.3}");
    let zero = SamplerConfig { diffusion: Diffusion::Zero, ..sde.clone() };
    let same = sample_sde(&field, &zero, 8, size)?.bit_eq(&sample_ode(&field, &SamplerConfig { kind: SamplerKind::Ode, ..zero }, 8, size)?);
    println!("SDE with zero diffusion equals the ODE bit for bit: {same}");
    Ok(())
}
