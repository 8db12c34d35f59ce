//! Vocabulary, corpora, padded minibatches and the synthetic corpus generator.

mod batch;
mod corpus;
mod synth;
mod vocab;

pub use batch::{batches, sequential_batches, Batch};
pub use corpus::{Corpus, Split};
pub use synth::{synth_corpus, MarkovChain, SynthCorpus, SynthParams, SynthSizes};
pub use vocab::{Vocab, BOS, EOS, NUM_RESERVED, PAD, UNK};
