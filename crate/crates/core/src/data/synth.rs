use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::vocab::{Vocab, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

/// Shape of the synthetic grammar: a uniform mixture of `clusters`
/// first-order Markov chains over `vocab` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub clusters: usize,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Scale of the transition logits; larger means more predictable chains.
    pub sharpness: f64,
    /// Weight of the cluster-specific logits against the logits shared by
    /// every cluster, in `[0, 1]`.
    pub cluster_weight: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            clusters: 4,
            vocab: 40,
            min_len: 8,
            max_len: 20,
            sharpness: 2.0,
            cluster_weight: 0.6,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.vocab == 0 {
            return Err(Error::config("synthetic grammar needs at least one cluster and one token"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0) {
            return Err(Error::config("sharpness must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.cluster_weight) {
            return Err(Error::config("cluster_weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            valid: 200,
            test: 200,
        }
    }
}

/// A first-order chain over synthetic token indices `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    /// Row-stochastic `n×n`.
    pub transition: Vec<Vec<f64>>,
    /// Start distribution; the stationary distribution of `transition`.
    pub initial: Vec<f64>,
}

impl MarkovChain {
    fn random(shared: &[Vec<f64>], params: &SynthParams, rng: &mut Rng) -> Self {
        let n = params.vocab;
        let w = params.cluster_weight;
        let transition: Vec<Vec<f64>> = shared
            .iter()
            .map(|shared_row| {
                let logits: Vec<f64> = shared_row
                    .iter()
                    .map(|&s| {
                        let own: f64 = StandardNormal.sample(rng);
                        params.sharpness * ((1.0 - w) * s + w * own)
                    })
                    .collect();
                softmax(&logits)
            })
            .collect();
        let initial = stationary(&transition);
        debug_assert_eq!(initial.len(), n);
        Self { transition, initial }
    }

    fn sample_from(probs: &[f64], rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut seq = Vec::with_capacity(len);
        let mut cur = Self::sample_from(&self.initial, rng);
        seq.push(cur);
        while seq.len() < len {
            cur = Self::sample_from(&self.transition[cur], rng);
            seq.push(cur);
        }
        seq
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Stationary distribution by power iteration.
fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    let z: f64 = pi.iter().sum();
    pi.into_iter().map(|p| p / z).collect()
}

/// Generated corpus together with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub corpus: Corpus,
    pub chains: Vec<MarkovChain>,
    /// Cluster of every sequence, per split in `[train, valid, test]` order.
    pub labels: [Vec<usize>; 3],
}

/// Sample a corpus from a seeded mixture of Markov chains.
///
/// The grammar and each split draw from separate streams of `seed`, so the
/// splits are independent and resizing one leaves the others untouched.
pub fn synth_corpus(seed: u64, sizes: SynthSizes, params: &SynthParams) -> Result<SynthCorpus> {
    params.validate()?;
    if sizes.train == 0 || sizes.valid == 0 || sizes.test == 0 {
        return Err(Error::config("every split needs at least one sequence"));
    }
    let mut grammar_rng = rng::stream(seed, streams::GRAMMAR);
    let shared: Vec<Vec<f64>> = (0..params.vocab)
        .map(|_| (0..params.vocab).map(|_| StandardNormal.sample(&mut grammar_rng)).collect())
        .collect();
    let chains: Vec<MarkovChain> = (0..params.clusters)
        .map(|_| MarkovChain::random(&shared, params, &mut grammar_rng))
        .collect();

    let draw = |n: usize, stream: u64| {
        let mut rng = rng::stream(seed, stream);
        let mut seqs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..params.clusters);
            let len = rng.random_range(params.min_len..=params.max_len);
            let seq = chains[c].sample(len, &mut rng);
            seqs.push(seq.into_iter().map(|t| t + NUM_RESERVED).collect::<Vec<_>>());
            labels.push(c);
        }
        (seqs, labels)
    };
    let (train, train_labels) = draw(sizes.train, streams::SPLIT_TRAIN);
    let (valid, valid_labels) = draw(sizes.valid, streams::SPLIT_VALID);
    let (test, test_labels) = draw(sizes.test, streams::SPLIT_TEST);

    let vocab = Vocab::from_tokens((0..params.vocab).map(|k| format!("w{k:02}")))?;
    Ok(SynthCorpus {
        vocab,
        corpus: Corpus {
            train,
            valid,
            test,
            provenance: format!("synthetic seed={seed}"),
        },
        chains,
        labels: [train_labels, valid_labels, test_labels],
    })
}
