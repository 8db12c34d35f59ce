//! Optimisation loops: plain minibatch SGD with plateau decay and early
//! stopping, and the aggressive scheme that runs encoder-only updates to
//! convergence on a probe batch before each decoder update.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{batches, sequential_batches, Batch, Corpus};
use crate::error::{Error, Result};
use crate::metrics::{self, PosteriorTable, DEFAULT_AU_THRESHOLD, DEFAULT_EPOCH_K, DISPERSION_SAMPLE};
use crate::nn::{ParamId, ParamStore};
use crate::rng::{self, streams, Rng};
use crate::schedule::{AnnealConfig, AnnealSchedule};
use crate::tensor::{Graph, Tensor};
use crate::vae::VaeModel;

pub const LOG_FORMAT_VERSION: u32 = 1;
const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Standard,
    Aggressive,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "aggressive" => Ok(Self::Aggressive),
            other => Err(Error::config(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggressiveConfig {
    /// Inner loop stops after this many encoder updates without a new best
    /// probe loss.
    pub inner_batch_window: usize,
    /// Aggressive mode ends once validation MI gains less than this between
    /// epochs.
    pub mi_plateau_threshold: f64,
    /// Hard cap on encoder updates per decoder update.
    pub max_inner_steps: usize,
}

impl Default for AggressiveConfig {
    fn default() -> Self {
        Self {
            inner_batch_window: 10,
            mi_plateau_threshold: 0.01,
            max_inner_steps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub scheme: Scheme,
    pub anneal: AnnealConfig,
    pub lambda_cos: f64,
    pub word_dropout: f64,
    pub aggressive: AggressiveConfig,
    /// Importance samples for the per-epoch validation NLL; 0 skips it.
    pub epoch_eval_k: usize,
    pub au_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            lr_decay_factor: 0.5,
            grad_clip_norm: 5.0,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            batch_size: 32,
            scheme: Scheme::Standard,
            anneal: AnnealConfig::default(),
            lambda_cos: 0.0,
            word_dropout: 0.0,
            aggressive: AggressiveConfig::default(),
            epoch_eval_k: DEFAULT_EPOCH_K,
            au_threshold: DEFAULT_AU_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1]"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm must be positive (use inf to disable)"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.lambda_cos >= 0.0 && self.lambda_cos.is_finite()) {
            return Err(Error::config("lambda_cos must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return Err(Error::config("word_dropout must lie in [0, 1]"));
        }
        if self.aggressive.inner_batch_window == 0 || self.aggressive.max_inner_steps == 0 {
            return Err(Error::config("aggressive window and max_inner_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.anneal.ramp_fraction) || self.anneal.ramp_fraction == 0.0 {
            return Err(Error::config("ramp_fraction must lie in (0, 1]"));
        }
        if !(self.anneal.warmup_epochs >= 0.0) {
            return Err(Error::config("warmup_epochs must be non-negative"));
        }
        Ok(())
    }
}

/// Outcome of one [`sgd_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub applied: bool,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Clip the global gradient norm of `ids` (all parameters if `None`) to
/// `clip`, apply `p ← p − lr·grad` to those parameters and reset every
/// gradient in the store. A non-finite gradient skips the update.
pub fn sgd_step(store: &mut ParamStore, ids: Option<&[ParamId]>, lr: f64, clip: f64) -> StepOutcome {
    let all: Vec<ParamId>;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            all = store.ids().collect();
            &all
        }
    };
    let sq: f64 = ids
        .iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        log::warn!("non-finite gradient norm; update skipped");
        store.zero_grads();
        return StepOutcome {
            applied: false,
            grad_norm: norm,
        };
    }
    let scale = if norm > clip { clip / norm } else { 1.0 };
    for &id in ids {
        let t = store.get_mut(id);
        if let Some(grad) = t.take_grad() {
            t.data_mut().iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * scale * g);
        }
    }
    store.zero_grads();
    StepOutcome {
        applied: true,
        grad_norm: norm,
    }
}

/// Validation statistics computed after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationStats {
    /// Negative ELBO at β = 1 (one fixed posterior sample, analytic KL);
    /// drives lr decay, early stopping and model selection.
    pub bound: f64,
    pub reconstruction_nll: f64,
    pub nll_iwae: Option<f64>,
    pub kl: f64,
    pub mi: f64,
    pub active_units: usize,
    pub mean_pairwise_cosine: f64,
}

/// Per-epoch validation pass. Sampling uses fixed streams of `seed`, so the
/// same model always gets the same numbers.
pub fn validation_stats(model: &VaeModel, items: &[Vec<usize>], config: &TrainConfig) -> Result<ValidationStats> {
    let table = metrics::encode_split(model, items)?;
    let d = model.config.latent_dim;
    let mut noise_rng = rng::stream(config.seed, streams::EVAL);
    let mut rec = 0.0;
    for batch in sequential_batches(items, EVAL_BATCH)? {
        let z = sample_posterior(&table, &batch.indices, d, &mut noise_rng)?;
        rec -= model.log_likelihood(&batch, &z)?.iter().sum::<f64>();
    }
    let reconstruction_nll = rec / items.len() as f64;
    let kl = table.mean_kl();
    let nll_iwae = match config.epoch_eval_k {
        0 => None,
        k => {
            let mut iw_rng = rng::stream(config.seed, streams::EPOCH_IWAE);
            Some(metrics::iwae_nll_with(model, items, &table, k, &mut iw_rng)?.nll)
        }
    };
    let mi = if table.len() >= 2 {
        metrics::mutual_information_of(&table.mu, &table.log_var, &mut rng::stream(config.seed, streams::MI))?
    } else {
        0.0
    };
    Ok(ValidationStats {
        bound: reconstruction_nll + kl,
        reconstruction_nll,
        nll_iwae,
        kl,
        mi,
        active_units: metrics::active_units_of(&table.mu, config.au_threshold),
        mean_pairwise_cosine: metrics::dispersion_of(&table.features, DISPERSION_SAMPLE),
    })
}

fn sample_posterior(table: &PosteriorTable, indices: &[usize], d: usize, rng: &mut Rng) -> Result<Tensor> {
    let eps = rng::standard_normal(rng, indices.len() * d);
    let mut z = Vec::with_capacity(eps.len());
    for (r, &i) in indices.iter().enumerate() {
        for j in 0..d {
            z.push(table.mu[i][j] + (0.5 * table.log_var[i][j]).exp() * eps[r * d + j]);
        }
    }
    Tensor::new(vec![indices.len(), d], z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// KL weight at the last update of the epoch.
    pub beta: f64,
    pub train_nll: f64,
    pub train_kl: f64,
    pub train_cosine: f64,
    pub train_loss: f64,
    pub val: ValidationStats,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Cumulative applied updates, inner-loop updates included.
    pub updates: u64,
    /// Cumulative skipped (non-finite) updates.
    pub skipped: u64,
    pub aggressive: bool,
    /// Seconds since training started. Kept in memory only; excluded from
    /// written logs so they stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial: ValidationStats,
    pub records: Vec<EpochRecord>,
    /// 0 when no epoch improved on the initial model.
    pub best_epoch: usize,
    pub best_bound: f64,
    pub stopped_early: bool,
    pub aggressive_exit_epoch: Option<usize>,
}

impl TrainLog {
    pub fn total_updates(&self) -> u64 {
        self.records.last().map_or(0, |r| r.updates)
    }

    pub fn skipped_updates(&self) -> u64 {
        self.records.last().map_or(0, |r| r.skipped)
    }

    pub const CSV_HEADER: [&'static str; 18] = [
        "epoch",
        "beta",
        "train_nll",
        "train_kl",
        "train_cosine",
        "train_loss",
        "val_bound",
        "val_nll",
        "val_nll_iwae",
        "val_kl",
        "val_mi",
        "val_au",
        "val_cosine",
        "lr",
        "updates",
        "skipped",
        "aggressive",
        "improved",
    ];

    /// One row per epoch, columns in [`TrainLog::CSV_HEADER`] order, after a
    /// `# format_version` comment line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# format_version: {LOG_FORMAT_VERSION}").map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(Self::CSV_HEADER)?;
        let mut best = self.initial.bound;
        for r in &self.records {
            let improved = r.val.bound < best;
            if improved {
                best = r.val.bound;
            }
            let v = &r.val;
            w.write_record([
                r.epoch.to_string(),
                r.beta.to_string(),
                r.train_nll.to_string(),
                r.train_kl.to_string(),
                r.train_cosine.to_string(),
                r.train_loss.to_string(),
                v.bound.to_string(),
                v.reconstruction_nll.to_string(),
                v.nll_iwae.map(|x| x.to_string()).unwrap_or_default(),
                v.kl.to_string(),
                v.mi.to_string(),
                v.active_units.to_string(),
                v.mean_pairwise_cosine.to_string(),
                r.lr.to_string(),
                r.updates.to_string(),
                r.skipped.to_string(),
                u8::from(r.aggressive).to_string(),
                u8::from(improved).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Best model by validation bound, rounded to checkpoint precision.
    pub best_model: VaeModel,
}

/// Where (if anywhere) the trainer writes the best checkpoint as it
/// improves, and the metadata stored with it (an `epoch` field is added).
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink<'a> {
    pub path: Option<&'a Path>,
    pub meta: serde_json::Value,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    corpus: &'a Corpus,
    schedule: AnnealSchedule,
    step: u64,
    updates: u64,
    skipped: u64,
    lr: f64,
    noise_rng: Rng,
}

#[derive(Default)]
struct EpochSums {
    nll: f64,
    kl: f64,
    cos: f64,
    loss: f64,
    batches: usize,
    beta: f64,
}

impl Trainer<'_> {
    /// Forward, backward and an SGD step restricted to `ids`.
    fn update(&mut self, model: &mut VaeModel, batch: &Batch, ids: Option<&[ParamId]>, beta: f64) -> Result<(f64, f64, f64, f64)> {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let out = model.loss(
            &mut g,
            &b,
            batch,
            beta,
            self.config.lambda_cos,
            self.config.word_dropout,
            &mut self.noise_rng,
        )?;
        g.backward(out.total)?;
        model.params.accumulate_grads(&g, &b);
        let step = sgd_step(&mut model.params, ids, self.lr, self.config.grad_clip_norm);
        if step.applied {
            self.updates += 1;
        } else {
            self.skipped += 1;
        }
        let br = out.breakdown;
        Ok((br.reconstruction_nll, br.kl, br.cosine_penalty, br.total))
    }

    fn standard_step(&mut self, model: &mut VaeModel, batch: &Batch, sums: &mut EpochSums) -> Result<()> {
        let beta = self.schedule.beta_at(self.step);
        let (nll, kl, cos, loss) = self.update(model, batch, None, beta)?;
        sums.add(nll, kl, cos, loss, beta);
        self.step += 1;
        Ok(())
    }
}

impl EpochSums {
    fn add(&mut self, nll: f64, kl: f64, cos: f64, loss: f64, beta: f64) {
        self.nll += nll;
        self.kl += kl;
        self.cos += cos;
        self.loss += loss;
        self.batches += 1;
        self.beta = beta;
    }

    fn mean(&self, x: f64) -> f64 {
        if self.batches == 0 {
            f64::NAN
        } else {
            x / self.batches as f64
        }
    }
}

/// Probe objective for the aggressive inner loop: the training loss at the
/// current β on a fixed batch with fixed noise and no dropout.
struct Probe {
    batch: Batch,
    noise: Tensor,
}

impl Probe {
    fn new(corpus: &Corpus, config: &TrainConfig, d: usize) -> Result<Self> {
        let n = corpus.valid.len().min(config.batch_size);
        let seqs: Vec<&[usize]> = corpus.valid[..n].iter().map(Vec::as_slice).collect();
        let batch = Batch::new(&seqs, (0..n).collect())?;
        let mut rng = rng::stream(config.seed, streams::PROBE);
        let noise = Tensor::new(vec![n, d], rng::standard_normal(&mut rng, n * d))?;
        Ok(Self { batch, noise })
    }

    fn loss(&self, model: &VaeModel, beta: f64, lambda_cos: f64) -> Result<f64> {
        let mut g = Graph::inference();
        let b = model.params.bind(&mut g);
        let mut unused = rng::stream(0, 0);
        let out = model.loss_with_noise(&mut g, &b, &self.batch, beta, lambda_cos, 0.0, &self.noise, &mut unused)?;
        Ok(out.breakdown.total)
    }
}

/// Endless stream of shuffled training batches for the inner loop,
/// independent of the outer epoch order.
struct InnerBatches<'a> {
    split: &'a [Vec<usize>],
    batch_size: usize,
    seed: u64,
    pass: u64,
    queue: std::vec::IntoIter<Batch>,
}

impl InnerBatches<'_> {
    fn next_batch(&mut self) -> Result<Batch> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            let seed = rng::child_seed(self.seed, streams::INNER, self.pass);
            self.pass += 1;
            self.queue = batches(self.split, self.batch_size, seed)?.into_iter();
        }
    }
}

/// Train `model` on `corpus.train`, validating on `corpus.valid` after
/// every epoch. Uses the scheme named in `config`.
pub fn train(model: &mut VaeModel, corpus: &Corpus, config: &TrainConfig, sink: CheckpointSink<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() || corpus.valid.is_empty() {
        return Err(Error::contract("training needs non-empty train and valid splits"));
    }
    let steps_per_epoch = corpus.train.len().div_ceil(config.batch_size) as u64;
    let schedule = config.anneal.resolve(steps_per_epoch, config.max_epochs as u64)?;
    let started = Instant::now();
    let mut tr = Trainer {
        config,
        corpus,
        schedule,
        step: 0,
        updates: 0,
        skipped: 0,
        lr: config.learning_rate,
        noise_rng: rng::stream(config.seed, streams::NOISE),
    };

    // Validation runs on the f32 snapshot a checkpoint would hold, so
    // logged metrics replay exactly from saved checkpoints.
    let mut best_model = model.quantized();
    let initial = validation_stats(&best_model, &corpus.valid, config)?;
    let mut best_bound = initial.bound;
    let mut best_epoch = 0;
    save_best(&best_model, &sink, 0)?;

    let mut aggressive = config.scheme == Scheme::Aggressive;
    let mut aggressive_exit_epoch = None;
    let mut prev_mi = initial.mi;
    let probe = if aggressive {
        Some(Probe::new(corpus, config, model.config.latent_dim)?)
    } else {
        None
    };
    let mut inner = InnerBatches {
        split: &corpus.train,
        batch_size: config.batch_size,
        seed: config.seed,
        pass: 0,
        queue: Vec::new().into_iter(),
    };
    let encoder_ids = model.encoder_params();
    let decoder_ids = model.decoder_params();

    let mut records = Vec::new();
    let mut bad_epochs = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let lr_used = tr.lr;
        let was_aggressive = aggressive;
        let order_seed = rng::child_seed(config.seed, streams::SHUFFLE, epoch as u64);
        let mut sums = EpochSums::default();
        for batch in batches(&tr.corpus.train, config.batch_size, order_seed)? {
            match (&probe, aggressive) {
                (Some(probe), true) => {
                    let beta = tr.schedule.beta_at(tr.step);
                    let mut best = probe.loss(model, beta, config.lambda_cos)?;
                    let (mut since, mut n) = (0, 0);
                    while since < config.aggressive.inner_batch_window && n < config.aggressive.max_inner_steps {
                        let inner_batch = inner.next_batch()?;
                        tr.update(model, &inner_batch, Some(&encoder_ids), beta)?;
                        n += 1;
                        let p = probe.loss(model, beta, config.lambda_cos)?;
                        if p < best {
                            best = p;
                            since = 0;
                        } else {
                            since += 1;
                        }
                    }
                    let (nll, kl, cos, loss) = tr.update(model, &batch, Some(&decoder_ids), beta)?;
                    sums.add(nll, kl, cos, loss, beta);
                    tr.step += 1;
                }
                _ => tr.standard_step(model, &batch, &mut sums)?,
            }
        }

        let snapshot = model.quantized();
        let val = validation_stats(&snapshot, &corpus.valid, config)?;
        if aggressive && val.mi - prev_mi < config.aggressive.mi_plateau_threshold {
            aggressive = false;
            aggressive_exit_epoch = Some(epoch);
            log::info!("epoch {epoch}: validation MI plateaued, leaving aggressive mode");
        }
        prev_mi = val.mi;

        let improved = val.bound < best_bound;
        if improved {
            best_bound = val.bound;
            best_epoch = epoch;
            best_model = snapshot;
            save_best(&best_model, &sink, epoch)?;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            tr.lr *= config.lr_decay_factor;
        }
        log::info!(
            "epoch {epoch}: beta {:.3} train loss {:.3} val bound {:.3} kl {:.3} mi {:.3} au {} cos {:.3}",
            sums.beta,
            sums.mean(sums.loss),
            val.bound,
            val.kl,
            val.mi,
            val.active_units,
            val.mean_pairwise_cosine
        );
        records.push(EpochRecord {
            epoch,
            beta: sums.beta,
            train_nll: sums.mean(sums.nll),
            train_kl: sums.mean(sums.kl),
            train_cosine: sums.mean(sums.cos),
            train_loss: sums.mean(sums.loss),
            val,
            lr: lr_used,
            updates: tr.updates,
            skipped: tr.skipped,
            aggressive: was_aggressive,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
        if !improved && bad_epochs >= config.patience {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        log: TrainLog {
            initial,
            records,
            best_epoch,
            best_bound,
            stopped_early,
            aggressive_exit_epoch,
        },
        best_model,
    })
}

fn save_best(model: &VaeModel, sink: &CheckpointSink<'_>, epoch: usize) -> Result<()> {
    if let Some(path) = sink.path {
        let mut meta = match &sink.meta {
            serde_json::Value::Object(m) => m.clone(),
            serde_json::Value::Null => serde_json::Map::new(),
            other => serde_json::Map::from_iter([("meta".to_string(), other.clone())]),
        };
        meta.insert("epoch".into(), epoch.into());
        checkpoint::save(model, serde_json::Value::Object(meta), path)?;
    }
    Ok(())
}
