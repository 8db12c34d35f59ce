//! Generate the synthetic Markov-mixture corpus and look at it.
//!
//! ```text
//! cargo run --release --example synthetic_corpus -- [out_dir]
//! ```
//!
//! With an output directory the splits and vocabulary are written there in
//! the same layout `gen-corpus` produces.

use std::path::PathBuf;

use seqvae::data::{synth_corpus, Split, SynthParams, SynthSizes};

fn main() -> seqvae::Result<()> {
    let params = SynthParams::default();
    let s = synth_corpus(7, SynthSizes::default(), &params)?;

    let train = s.corpus.split(Split::Train);
    let mut per_cluster = vec![0usize; params.clusters];
    for &c in &s.labels[0] {
        per_cluster[c] += 1;
    }
    let mean_len = train.iter().map(Vec::len).sum::<usize>() as f64 / train.len() as f64;
    println!("vocab {} tokens, {} train sequences, mean length {mean_len:.1}", s.vocab.len(), train.len());
    println!("sequences per cluster {per_cluster:?}");
    for (seq, c) in train.iter().zip(&s.labels[0]).take(6) {
        println!("  [{c}] {}", s.vocab.decode(seq));
    }

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        std::fs::create_dir_all(&dir).map_err(|e| seqvae::Error::io(&dir, e))?;
        s.corpus.write_dir(&dir, &s.vocab)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
