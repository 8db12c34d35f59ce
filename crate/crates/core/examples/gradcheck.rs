//! Finite-difference check of a small composite expression and of a full
//! VAE loss.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use seqvae::data::Batch;
use seqvae::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use seqvae::{rng, AggregationMethod, Graph, ModelConfig, Tensor, VaeModel};

fn main() -> seqvae::Result<()> {
    let a = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.05, -1.4, 0.6])?;
    let b = Tensor::new(vec![3, 2], vec![0.2, -0.5, 0.9, 0.4, -0.3, 0.8])?;

    // logsumexp(tanh(a) @ b) summed over rows
    let report = check_inputs(&[a, b], DEFAULT_STEP, |g: &mut Graph, v| {
        let t = g.tanh(v[0]);
        let m = g.matmul(t, v[1])?;
        let l = g.logsumexp_axis(m, 1)?;
        Ok(g.sum(l))
    })?;
    println!(
        "expression: {} coordinates, max rel err {:.2e}",
        report.coordinates, report.max_rel_error
    );

    for agg in AggregationMethod::ALL {
        let cfg = ModelConfig {
            vocab_size: 8,
            embed_dim: 3,
            hidden_dim: 4,
            latent_dim: 2,
            aggregation: agg,
        };
        let model = VaeModel::new(cfg, 1)?;
        let seqs: [&[usize]; 2] = [&[4, 5, 6, 7], &[6, 4]];
        let batch = Batch::new(&seqs, vec![0, 1])?;
        let noise = Tensor::new(vec![2, 2], vec![0.3, -1.2, 0.8, 0.1])?;
        let report = check_params(&model.params, DEFAULT_STEP, |g, b| {
            let mut r = rng::stream(0, 0);
            Ok(model.loss_with_noise(g, b, &batch, 0.5, 0.0, 0.0, &noise, &mut r)?.total)
        })?;
        let worst = report.worst.as_ref().map(|w| w.0.as_str()).unwrap_or("-");
        println!(
            "vae loss ({agg}): {} coordinates, max rel err {:.2e} at {worst}",
            report.coordinates, report.max_rel_error
        );
    }
    Ok(())
}
