//! Evaluation: importance-weighted NLL, KL, mutual information, active units
//! and the feature-dispersion trace.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{sequential_batches, Batch, Split};
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::tensor::{log_sum_exp, Tensor};
use crate::vae::{gaussian_kl, mean_pairwise_cosine, VaeModel};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_AU_THRESHOLD: f64 = 0.01;
pub const DEFAULT_FINAL_K: usize = 500;
pub const DEFAULT_EPOCH_K: usize = 50;
pub const DISPERSION_SAMPLE: usize = 1000;

/// Rows per decoder call when scoring importance samples.
const SCORE_CHUNK: usize = 256;
const ENCODE_BATCH: usize = 64;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub split: Split,
    pub num_sequences: usize,
    pub num_samples_k: usize,
    /// Importance-weighted NLL estimate, nats per sequence.
    pub nll_iwae: f64,
    /// Single-sample ELBO estimate using the first importance sample.
    pub elbo_bound: f64,
    pub kl: f64,
    pub mi: f64,
    pub active_units: usize,
    pub mean_pairwise_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub au_threshold: f64,
    pub seed: u64,
    pub dispersion_sample: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_FINAL_K,
            au_threshold: DEFAULT_AU_THRESHOLD,
            seed: 0,
            dispersion_sample: DISPERSION_SAMPLE,
        }
    }
}

/// Encoder outputs for every item of a split, in split order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosteriorTable {
    pub mu: Vec<Vec<f64>>,
    pub log_var: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl PosteriorTable {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mean_kl(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.mu
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| gaussian_kl(m, lv))
            .sum::<f64>()
            / self.len() as f64
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

pub fn encode_split(model: &VaeModel, items: &[Vec<usize>]) -> Result<PosteriorTable> {
    let mut table = PosteriorTable::default();
    for batch in sequential_batches(items, ENCODE_BATCH)? {
        let enc = model.encode_values(&batch)?;
        table.mu.extend(rows(&enc.mu));
        table.log_var.extend(rows(&enc.log_var));
        table.features.extend(rows(&enc.features));
    }
    Ok(table)
}

/// `log N(z; mu, exp(log_var))` for a diagonal Gaussian.
pub fn log_normal(z: &[f64], mu: &[f64], log_var: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(log_var)
        .map(|((&z, &m), &lv)| -0.5 * (LN_2PI + lv + (z - m) * (z - m) / lv.exp()))
        .sum()
}

pub fn log_standard_normal(z: &[f64]) -> f64 {
    z.iter().map(|&z| -0.5 * (LN_2PI + z * z)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IwaeEstimate {
    /// Mean over items of `−(logsumexp_k w_k − log K)`.
    pub nll: f64,
    /// Mean over items of the single-sample ELBO `w_0`.
    pub elbo: f64,
    pub per_item_nll: Vec<f64>,
}

/// Importance-weighted NLL bound with `k` samples per item from `q(z|x)`.
pub fn iwae_nll(model: &VaeModel, items: &[Vec<usize>], k: usize, rng: &mut Rng) -> Result<IwaeEstimate> {
    let table = encode_split(model, items)?;
    iwae_nll_with(model, items, &table, k, rng)
}

/// [`iwae_nll`] with precomputed posteriors.
pub fn iwae_nll_with(
    model: &VaeModel,
    items: &[Vec<usize>],
    table: &PosteriorTable,
    k: usize,
    rng: &mut Rng,
) -> Result<IwaeEstimate> {
    if k == 0 {
        return Err(Error::contract("importance sampling needs K >= 1"));
    }
    if items.is_empty() {
        return Err(Error::contract("importance sampling needs at least one sequence"));
    }
    let d = model.config.latent_dim;
    let mut per_item_nll = Vec::with_capacity(items.len());
    let mut elbo_sum = 0.0;
    for (i, item) in items.iter().enumerate() {
        let (mu, lv) = (&table.mu[i], &table.log_var[i]);
        let mut weights = Vec::with_capacity(k);
        let mut done = 0;
        while done < k {
            let m = (k - done).min(SCORE_CHUNK);
            let eps = rng::standard_normal(rng, m * d);
            let mut z = Vec::with_capacity(m * d);
            let mut log_prior_minus_q = Vec::with_capacity(m);
            for s in 0..m {
                let e = &eps[s * d..(s + 1) * d];
                let zs: Vec<f64> = (0..d).map(|j| mu[j] + (0.5 * lv[j]).exp() * e[j]).collect();
                log_prior_minus_q.push(log_standard_normal(&zs) - log_normal(&zs, mu, lv));
                z.extend(zs);
            }
            let batch = Batch::new(&vec![item.as_slice(); m], vec![i; m])?;
            let ll = model.log_likelihood(&batch, &Tensor::new(vec![m, d], z)?)?;
            weights.extend(ll.iter().zip(&log_prior_minus_q).map(|(a, b)| a + b));
            done += m;
        }
        elbo_sum += weights[0];
        per_item_nll.push(-(log_sum_exp(&weights) - (k as f64).ln()));
    }
    let n = items.len() as f64;
    Ok(IwaeEstimate {
        nll: per_item_nll.iter().sum::<f64>() / n,
        elbo: elbo_sum / n,
        per_item_nll,
    })
}

/// Mutual information estimate from a posterior table, one `z` per item:
/// mean KL to the prior minus the mean of `log q(z_i) − log p(z_i)` with the
/// aggregate posterior `q(z) = 1/N Σ_j q(z|x_j)`. Clipped below at 0.
pub fn mutual_information_of(mu: &[Vec<f64>], log_var: &[Vec<f64>], rng: &mut Rng) -> Result<f64> {
    let n = mu.len();
    if n < 2 {
        return Err(Error::contract("mutual information needs at least two items"));
    }
    let d = mu[0].len();
    let mean_kl = mu.iter().zip(log_var).map(|(m, lv)| gaussian_kl(m, lv)).sum::<f64>() / n as f64;
    let z: Vec<Vec<f64>> = mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| {
            let e = rng::standard_normal(rng, d);
            (0..d).map(|j| m[j] + (0.5 * lv[j]).exp() * e[j]).collect()
        })
        .collect();
    let ln_n = (n as f64).ln();
    let mut aggregate_term = 0.0;
    let mut dens = vec![0.0; n];
    for zi in &z {
        for (j, slot) in dens.iter_mut().enumerate() {
            *slot = log_normal(zi, &mu[j], &log_var[j]);
        }
        let log_q_agg = log_sum_exp(&dens) - ln_n;
        aggregate_term += log_q_agg - log_standard_normal(zi);
    }
    Ok((mean_kl - aggregate_term / n as f64).max(0.0))
}

pub fn mutual_information(model: &VaeModel, items: &[Vec<usize>], rng: &mut Rng) -> Result<f64> {
    let t = encode_split(model, items)?;
    mutual_information_of(&t.mu, &t.log_var, rng)
}

/// Number of latent dimensions whose posterior mean has sample variance
/// (`N − 1` denominator) above `threshold` across items.
pub fn active_units_of(means: &[Vec<f64>], threshold: f64) -> usize {
    let n = means.len();
    if n < 2 {
        return 0;
    }
    let d = means[0].len();
    (0..d)
        .filter(|&j| {
            let mean = means.iter().map(|m| m[j]).sum::<f64>() / n as f64;
            let var = means.iter().map(|m| (m[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            var > threshold
        })
        .count()
}

pub fn active_units(model: &VaeModel, items: &[Vec<usize>], threshold: f64) -> Result<usize> {
    let t = encode_split(model, items)?;
    Ok(active_units_of(&t.mu, threshold))
}

/// Mean pairwise cosine similarity of the first `limit` feature rows.
pub fn dispersion_of(features: &[Vec<f64>], limit: usize) -> f64 {
    let rows: Vec<&[f64]> = features.iter().take(limit).map(Vec::as_slice).collect();
    mean_pairwise_cosine(&rows)
}

pub fn dispersion_trace(model: &VaeModel, items: &[Vec<usize>]) -> Result<f64> {
    let prefix = &items[..items.len().min(DISPERSION_SAMPLE)];
    let t = encode_split(model, prefix)?;
    Ok(dispersion_of(&t.features, DISPERSION_SAMPLE))
}

/// Full metric suite on one split. Sampling is seeded from `config.seed`,
/// so the report is a deterministic function of the model and data.
pub fn evaluate(model: &VaeModel, items: &[Vec<usize>], split: Split, config: &EvalConfig) -> Result<MetricsReport> {
    let table = encode_split(model, items)?;
    let mut iw_rng = rng::stream(config.seed, streams::EVAL);
    let iw = iwae_nll_with(model, items, &table, config.k, &mut iw_rng)?;
    let mut mi_rng = rng::stream(config.seed, streams::MI);
    let mi = if table.len() >= 2 {
        mutual_information_of(&table.mu, &table.log_var, &mut mi_rng)?
    } else {
        0.0
    };
    Ok(MetricsReport {
        format_version: REPORT_FORMAT_VERSION,
        split,
        num_sequences: items.len(),
        num_samples_k: config.k,
        nll_iwae: iw.nll,
        elbo_bound: iw.elbo,
        kl: table.mean_kl(),
        mi,
        active_units: active_units_of(&table.mu, config.au_threshold),
        mean_pairwise_cosine: dispersion_of(&table.features, config.dispersion_sample),
    })
}

/// Constant used by log-density helpers; exposed for tests.
pub fn ln_2pi() -> f64 {
    debug_assert!((LN_2PI - (2.0 * PI).ln()).abs() < 1e-15);
    LN_2PI
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "split",
        "num_sequences",
        "k",
        "nll_iwae",
        "elbo_bound",
        "kl",
        "mi",
        "active_units",
        "mean_pairwise_cosine",
        "format_version",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.split.to_string(),
            self.num_sequences.to_string(),
            self.num_samples_k.to_string(),
            self.nll_iwae.to_string(),
            self.elbo_bound.to_string(),
            self.kl.to_string(),
            self.mi.to_string(),
            self.active_units.to_string(),
            self.mean_pairwise_cosine.to_string(),
            self.format_version.to_string(),
        ]
    }
}
