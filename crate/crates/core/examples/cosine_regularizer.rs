//! Effect of the pairwise-cosine penalty on the encoder features of the
//! three-unit toy model.
//!
//! ```text
//! cargo run --release --example cosine_regularizer
//! ```

use seqvae::data::SynthSizes;
use seqvae::experiment::{self, DataSource, Recipe};

fn main() -> seqvae::Result<()> {
    println!("{:<8} {:>6} {:>9} {:>8} {:>8}", "recipe", "seed", "bound", "kl", "cosine");
    for recipe in [Recipe::Toy3d, Recipe::Cosreg] {
        for seed in 1..=2 {
            let mut spec = recipe.spec(seed);
            spec.train.max_epochs = 6;
            spec.train.epoch_eval_k = 0;
            spec.final_k = 10;
            if let DataSource::Synthetic { sizes, .. } = &mut spec.data {
                *sizes = SynthSizes { train: 600, valid: 100, test: 100 };
            }
            let out = experiment::run(&spec, None)?;
            let v = &out.summary.final_valid;
            println!(
                "{:<8} {:>6} {:>9.3} {:>8.4} {:>8.3}",
                recipe.name(),
                seed,
                out.summary.best_val_bound,
                v.kl,
                v.mean_pairwise_cosine
            );
        }
    }
    Ok(())
}
