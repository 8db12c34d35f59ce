//! Train the same small VAE with each aggregation method and compare the
//! collapse diagnostics of the selected models.
//!
//! ```text
//! cargo run --release --example collapse_vs_pooling -- [epochs] [train_size]
//! ```

use seqvae::data::SynthSizes;
use seqvae::experiment::{self, DataSource, Recipe};

fn main() -> seqvae::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let epochs = args.next().unwrap_or(8);
    let train = args.next().unwrap_or(600);

    println!("{:<14} {:>9} {:>8} {:>8} {:>4} {:>8}", "recipe", "bound", "kl", "mi", "au", "cosine");
    for recipe in [Recipe::BaselineLast, Recipe::Avgpool, Recipe::Maxpool, Recipe::Abspool] {
        let mut spec = recipe.spec(1);
        spec.train.max_epochs = epochs;
        spec.train.epoch_eval_k = 0;
        spec.final_k = 20;
        if let DataSource::Synthetic { sizes, .. } = &mut spec.data {
            *sizes = SynthSizes { train, valid: 100, test: 100 };
        }
        let out = experiment::run(&spec, None)?;
        let v = &out.summary.final_valid;
        println!(
            "{:<14} {:>9.3} {:>8.4} {:>8.4} {:>4} {:>8.3}",
            recipe.name(),
            out.summary.best_val_bound,
            v.kl,
            v.mi,
            v.active_units,
            v.mean_pairwise_cosine
        );
    }
    Ok(())
}
