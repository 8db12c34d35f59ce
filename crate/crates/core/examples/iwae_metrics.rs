//! Train a small model briefly, then report the importance-weighted NLL at
//! several sample counts along with the posterior diagnostics.
//!
//! ```text
//! cargo run --release --example iwae_metrics
//! ```

use seqvae::data::{Split, SynthSizes};
use seqvae::experiment::{self, DataSource, Recipe};
use seqvae::metrics::{evaluate, EvalConfig};

fn main() -> seqvae::Result<()> {
    let mut spec = Recipe::Avgpool.spec(2);
    spec.train.max_epochs = 4;
    spec.train.epoch_eval_k = 0;
    spec.final_k = 5;
    if let DataSource::Synthetic { sizes, .. } = &mut spec.data {
        *sizes = SynthSizes { train: 600, valid: 100, test: 100 };
    }
    let out = experiment::run(&spec, None)?;
    let (_, corpus) = spec.data.load(None)?;

    for k in [1, 5, 50, 250] {
        let cfg = EvalConfig { k, ..EvalConfig::default() };
        let r = evaluate(&out.model, corpus.split(Split::Test), Split::Test, &cfg)?;
        println!(
            "K={k:<4} nll {:.3}  elbo {:.3}  kl {:.4}  mi {:.4}  au {}  cosine {:.3}",
            r.nll_iwae, r.elbo_bound, r.kl, r.mi, r.active_units, r.mean_pairwise_cosine
        );
    }
    Ok(())
}
