use rand::seq::SliceRandom;

use super::vocab::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// A padded minibatch.
///
/// The encoder reads the raw tokens (no frame markers). The decoder input of
/// row `i` is `BOS x_1 .. x_n` and its target is `x_1 .. x_n EOS`, both of
/// length `n + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Position of each row in the split it came from.
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Longest row; the encoder token matrix is `B×max_len`.
    pub max_len: usize,
    /// Row-major `B×max_len`, PAD beyond each length.
    pub tokens: Vec<usize>,
    /// Row-major `B×(max_len+1)`.
    pub dec_input: Vec<usize>,
    pub dec_target: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[&[usize]], indices: Vec<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if let Some(pos) = seqs.iter().position(|s| s.is_empty()) {
            return Err(Error::Contract(format!("sequence {pos} of the batch is empty")));
        }
        let b = seqs.len();
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let td = max_len + 1;
        let mut tokens = vec![PAD; b * max_len];
        let mut dec_input = vec![PAD; b * td];
        let mut dec_target = vec![PAD; b * td];
        for (i, s) in seqs.iter().enumerate() {
            tokens[i * max_len..i * max_len + s.len()].copy_from_slice(s);
            dec_input[i * td] = BOS;
            dec_input[i * td + 1..i * td + 1 + s.len()].copy_from_slice(s);
            dec_target[i * td..i * td + s.len()].copy_from_slice(s);
            dec_target[i * td + s.len()] = EOS;
        }
        Ok(Self {
            indices,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            max_len,
            tokens,
            dec_input,
            dec_target,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn dec_len(&self) -> usize {
        self.max_len + 1
    }

    /// `mask[i*T + t] = t < lengths[i]` over the encoder matrix.
    pub fn mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&l| (0..self.max_len).map(move |t| t < l))
            .collect()
    }

    /// Decoder-side mask over `B×(max_len+1)`.
    pub fn dec_mask(&self) -> Vec<bool> {
        let td = self.dec_len();
        self.lengths
            .iter()
            .flat_map(|&l| (0..td).map(move |t| t <= l))
            .collect()
    }

    /// Encoder token ids at time step `t`, one per row.
    pub fn step(&self, t: usize) -> Vec<usize> {
        (0..self.size()).map(|i| self.tokens[i * self.max_len + t]).collect()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.max_len..i * self.max_len + self.lengths[i]]
    }

    /// Decoder inputs with word dropout applied: every non-BOS input inside a
    /// row's valid region becomes UNK with probability `rate`. `rng` is not
    /// touched when `rate` is 0 or 1.
    pub fn dropped_dec_input(&self, rate: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Contract(format!("word dropout rate {rate} outside [0, 1]")));
        }
        let mut out = self.dec_input.clone();
        if rate == 0.0 {
            return Ok(out);
        }
        let td = self.dec_len();
        for (i, &l) in self.lengths.iter().enumerate() {
            for t in 1..=l {
                if rate >= 1.0 || rand::Rng::random::<f64>(rng) < rate {
                    out[i * td + t] = UNK;
                }
            }
        }
        Ok(out)
    }

    /// The same rows repeated `times` times each (row `i` becomes rows
    /// `i*times .. (i+1)*times`).
    pub fn repeat_rows(&self, times: usize) -> Batch {
        let seqs: Vec<&[usize]> = (0..self.size())
            .flat_map(|i| std::iter::repeat_n(self.row(i), times))
            .collect();
        let indices = self
            .indices
            .iter()
            .flat_map(|&i| std::iter::repeat_n(i, times))
            .collect();
        Batch::new(&seqs, indices).expect("rows of a valid batch are non-empty")
    }
}

/// Length-bucketed shuffled minibatches covering `split` exactly once.
///
/// Rows are shuffled, stably sorted by length, cut into chunks of
/// `batch_size` (the last may be short) and the chunk order is shuffled.
pub fn batches(split: &[Vec<usize>], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut rng = rng::stream(seed, rng::streams::SHUFFLE);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| split[i].len());
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.shuffle(&mut rng);
    chunks
        .into_iter()
        .map(|idx| {
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| split[i].as_slice()).collect();
            Batch::new(&seqs, idx)
        })
        .collect()
}

/// Minibatches in split order, for evaluation.
pub fn sequential_batches(split: &[Vec<usize>], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    (0..split.len())
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(|idx| {
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| split[i].as_slice()).collect();
            Batch::new(&seqs, idx.to_vec())
        })
        .collect()
}
