//! Variational dual estimate of `KL(q || p)` for `q = N(1, 1)` and
//! `p = N(0, 1)`, where the true value is 0.5.
//!
//! ```text
//! cargo run --release --example dual_kl
//! ```

use seqvae::dualkl::{dual_kl_estimate, train_dual, DiagGaussian, DualFunction, DualTarget, DualTrainConfig, FnDual};
use seqvae::rng;

fn main() -> seqvae::Result<()> {
    let q = DiagGaussian {
        mu: vec![1.0],
        log_var: vec![0.0],
    };
    println!("analytic KL {:.4}", q.kl_to_standard());

    // log q(z) - log p(z) = z - 1/2 is the optimum
    let mut r = rng::stream(0, 0);
    for (name, slope, shift) in [("v = 0", 0.0, 0.0), ("v = z / 2", 0.5, 0.0), ("v = z - 1/2", 1.0, -0.5)] {
        let f = FnDual(|_: &[f64], z: &[f64]| slope * z[0] + shift);
        let e = dual_kl_estimate(&f, &[0.0], &q, 50_000, &mut r)?;
        println!("{name:<12} estimate {:.4} ± {:.4}", e.value, e.std_error);
    }

    let target = DualTarget { cond: vec![0.0], posterior: q };
    let cfg = DualTrainConfig {
        steps: 1500,
        hidden: vec![16],
        eval_samples: 20_000,
        log_every: 250,
        seed: 7,
        ..DualTrainConfig::default()
    };
    let mut v = DualFunction::new(1, 1, &cfg.hidden, cfg.seed)?;
    let trace = train_dual(&mut v, &vec![target.clone(); 64], &cfg, &[target])?;
    println!("learned v:");
    for e in &trace.entries {
        println!("  step {:>5}  estimate {:.4} ± {:.4}", e.step, e.estimate, e.std_error);
    }
    Ok(())
}
