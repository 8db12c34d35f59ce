//! Aggressive encoder updates: inner encoder-only loops until the encoder
//! stops improving, then one decoder step, until the validation mutual
//! information stops rising.
//!
//! ```text
//! cargo run --release --example aggressive -- [out_dir]
//! ```

use std::path::PathBuf;

use seqvae::data::SynthSizes;
use seqvae::experiment::{self, DataSource, Recipe};

fn main() -> seqvae::Result<()> {
    let out_dir = std::env::args().nth(1).map(PathBuf::from);
    for recipe in [Recipe::Maxpool, Recipe::Aggressive] {
        let mut spec = recipe.spec(1);
        spec.train.max_epochs = 6;
        spec.train.epoch_eval_k = 0;
        spec.final_k = 20;
        if let DataSource::Synthetic { sizes, .. } = &mut spec.data {
            *sizes = SynthSizes { train: 400, valid: 100, test: 100 };
        }
        let dir = out_dir.as_ref().map(|d| d.join(recipe.name()));
        let out = experiment::run(&spec, dir.as_deref())?;
        let s = &out.summary;
        println!(
            "{:<10} updates {:>6}  aggressive until epoch {:?}  kl {:.4}  mi {:.4}  bound {:.3}",
            recipe.name(),
            s.total_updates,
            s.aggressive_exit_epoch,
            s.final_valid.kl,
            s.final_valid.mi,
            s.best_val_bound
        );
        for r in &out.log.records {
            println!(
                "    epoch {:>2}  aggressive {:<5}  updates {:>6}  val kl {:.4}  val mi {:.4}",
                r.epoch, r.aggressive, r.updates, r.val.kl, r.val.mi
            );
        }
    }
    Ok(())
}
