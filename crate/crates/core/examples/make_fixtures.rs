//! Regenerates the files under `tests/fixtures`:
//!
//! * `untrained/`: a default-size model whose posterior heads are zero, so
//!   every input maps to the prior (KL 0, no active units).
//! * `smoke_pilot.json`: validation bound before training and after five
//!   epochs of the `baseline-last` recipe.
//!
//! ```text
//! cargo run --release --example make_fixtures [-- <fixtures dir>]
//! ```

use std::path::PathBuf;

use seqvae::experiment::{self, Recipe, CHECKPOINT_FILE, VOCAB_FILE};
use serde_json::json;

const SMOKE_EPOCHS: usize = 5;

fn main() -> seqvae::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures"));

    let spec = Recipe::BaselineLast.spec(0);
    let (vocab, _) = spec.data.load(None)?;
    let mut model = seqvae::VaeModel::new(spec.model_config(vocab.len()), 0)?;
    model.zero_posterior_heads();
    let untrained = dir.join("untrained");
    std::fs::create_dir_all(&untrained).map_err(|e| seqvae::Error::io(&untrained, e))?;
    seqvae::checkpoint::save(&model.quantized(), json!({ "spec": spec, "epoch": 0 }), &untrained.join(CHECKPOINT_FILE))?;
    vocab.save(&untrained.join(VOCAB_FILE))?;

    let mut spec = Recipe::BaselineLast.spec(1);
    spec.train.max_epochs = SMOKE_EPOCHS;
    spec.train.epoch_eval_k = 0;
    spec.final_k = 1;
    let out = experiment::run(&spec, None)?;
    let before = out.log.initial.bound;
    let after = out.log.records[SMOKE_EPOCHS - 1].val.bound;
    let pilot = json!({
        "format_version": 1,
        "recipe": "baseline-last",
        "seed": 1,
        "epochs": SMOKE_EPOCHS,
        "bound_epoch_0": before,
        "bound_epoch_5": after,
        // halfway between the two pilot values
        "threshold": 0.5 * (before + after),
    });
    experiment::write_json(&pilot, &dir.join("smoke_pilot.json"))?;
    println!("wrote fixtures to {}: bound {before:.3} -> {after:.3}", dir.display());
    Ok(())
}
