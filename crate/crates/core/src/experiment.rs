//! Named experiment recipes and the end-to-end run that produces a run
//! directory: checkpoint, per-epoch log, summary and vocabulary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationMethod;
use crate::checkpoint::{self, CheckpointHeader};
use crate::data::{synth_corpus, Corpus, Split, SynthParams, SynthSizes, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalConfig, MetricsReport, DEFAULT_FINAL_K};
use crate::schedule::AnnealKind;
use crate::train::{self, CheckpointSink, Scheme, TrainConfig, TrainLog};
use crate::vae::{ModelConfig, VaeModel};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const EVAL_CSV_FILE: &str = "eval.csv";
pub const DEFAULT_MAX_VOCAB: usize = 20_000;

/// Model width presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    /// Desk-scale default.
    Default,
    /// Three hidden units and a three-dimensional latent, small enough to
    /// plot the feature and latent spaces directly.
    Toy3d,
}

impl Size {
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Size::Default => (16, 32, 8),
            Size::Toy3d => (16, 3, 3),
        }
    }
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Size::Default),
            "toy3d" => Ok(Size::Toy3d),
            other => Err(Error::config(format!("unknown size {other:?} (expected default|toy3d)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    BaselineLast,
    Worddrop,
    Cosreg,
    Avgpool,
    Maxpool,
    Abspool,
    Aggressive,
    Cyclical,
    NoAnneal,
    Toy3d,
}

impl Recipe {
    pub const ALL: [Recipe; 10] = [
        Recipe::BaselineLast,
        Recipe::Worddrop,
        Recipe::Cosreg,
        Recipe::Avgpool,
        Recipe::Maxpool,
        Recipe::Abspool,
        Recipe::Aggressive,
        Recipe::Cyclical,
        Recipe::NoAnneal,
        Recipe::Toy3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::BaselineLast => "baseline-last",
            Recipe::Worddrop => "worddrop",
            Recipe::Cosreg => "cosreg",
            Recipe::Avgpool => "avgpool",
            Recipe::Maxpool => "maxpool",
            Recipe::Abspool => "abspool",
            Recipe::Aggressive => "aggressive",
            Recipe::Cyclical => "cyclical",
            Recipe::NoAnneal => "no-anneal",
            Recipe::Toy3d => "toy3d",
        }
    }

    /// Fully resolved settings for this recipe and training seed.
    pub fn spec(self, seed: u64) -> RunSpec {
        let mut s = RunSpec {
            recipe: self,
            size: Size::Default,
            aggregation: AggregationMethod::LastHidden,
            embed_dim: None,
            hidden_dim: None,
            latent_dim: None,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            final_k: DEFAULT_FINAL_K,
            data: DataSource::default(),
        };
        match self {
            Recipe::BaselineLast => {}
            Recipe::Worddrop => s.train.word_dropout = 0.4,
            Recipe::Cosreg => {
                s.size = Size::Toy3d;
                s.train.lambda_cos = 1.0;
            }
            Recipe::Avgpool => s.aggregation = AggregationMethod::AvgPool,
            Recipe::Maxpool => s.aggregation = AggregationMethod::MaxPool,
            Recipe::Abspool => s.aggregation = AggregationMethod::AbsPool,
            Recipe::Aggressive => s.train.scheme = Scheme::Aggressive,
            Recipe::Cyclical => {
                s.aggregation = AggregationMethod::MaxPool;
                s.train.anneal.kind = AnnealKind::Cyclical;
            }
            Recipe::NoAnneal => {
                s.aggregation = AggregationMethod::MaxPool;
                s.train.anneal.kind = AnnealKind::None;
            }
            Recipe::Toy3d => s.size = Size::Toy3d,
        }
        s
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Recipe::ALL.iter().map(|r| r.name()).collect();
            Error::config(format!("unknown recipe {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// Where the training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        seed: u64,
        sizes: SynthSizes,
        params: SynthParams,
    },
    /// Directory with `train.txt`, `valid.txt`, `test.txt`.
    Directory { path: PathBuf, max_vocab: usize },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            seed: 0,
            sizes: SynthSizes::default(),
            params: SynthParams::default(),
        }
    }
}

impl DataSource {
    /// Load the corpus. A directory source reuses `vocab` when given and
    /// otherwise builds one from its training split.
    pub fn load(&self, vocab: Option<Vocab>) -> Result<(Vocab, Corpus)> {
        match self {
            DataSource::Synthetic { seed, sizes, params } => {
                let s = synth_corpus(*seed, *sizes, params)?;
                Ok((s.vocab, s.corpus))
            }
            DataSource::Directory { path, max_vocab } => Corpus::load_dir(path, vocab, *max_vocab),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub recipe: Recipe,
    pub size: Size,
    pub aggregation: AggregationMethod,
    /// Explicit widths override the size preset.
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub latent_dim: Option<usize>,
    pub train: TrainConfig,
    /// Importance samples for the final validation report.
    pub final_k: usize,
    pub data: DataSource,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

impl RunSpec {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let (e, h, d) = self.size.dims();
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim.unwrap_or(e),
            hidden_dim: self.hidden_dim.unwrap_or(h),
            latent_dim: self.latent_dim.unwrap_or(d),
            aggregation: self.aggregation,
        }
    }

    /// Keys accepted by [`RunSpec::set`] (and therefore by config files).
    pub const KEYS: [&'static str; 33] = [
        "size",
        "aggregation",
        "embed_dim",
        "hidden_dim",
        "latent_dim",
        "lambda_cos",
        "word_dropout",
        "learning_rate",
        "lr_decay_factor",
        "grad_clip_norm",
        "max_epochs",
        "patience",
        "seed",
        "batch_size",
        "scheme",
        "anneal",
        "warmup_epochs",
        "cycles",
        "ramp_fraction",
        "inner_batch_window",
        "mi_plateau_threshold",
        "max_inner_steps",
        "epoch_eval_k",
        "au_threshold",
        "final_k",
        "data",
        "corpus_seed",
        "train_size",
        "valid_size",
        "test_size",
        "max_vocab",
        "sharpness",
        "cluster_weight",
    ];

    /// Override one setting from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "size" => self.size = parse(key, value)?,
            "aggregation" => self.aggregation = value.trim().parse().map_err(|_| Error::config(format!("invalid aggregation {value:?}")))?,
            "embed_dim" => self.embed_dim = Some(parse(key, value)?),
            "hidden_dim" => self.hidden_dim = Some(parse(key, value)?),
            "latent_dim" => self.latent_dim = Some(parse(key, value)?),
            "lambda_cos" => t.lambda_cos = parse(key, value)?,
            "word_dropout" => t.word_dropout = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "grad_clip_norm" => t.grad_clip_norm = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "scheme" => t.scheme = value.trim().parse()?,
            "anneal" => t.anneal.kind = value.trim().parse()?,
            "warmup_epochs" => t.anneal.warmup_epochs = parse(key, value)?,
            "cycles" => t.anneal.cycles = parse(key, value)?,
            "ramp_fraction" => t.anneal.ramp_fraction = parse(key, value)?,
            "inner_batch_window" => t.aggressive.inner_batch_window = parse(key, value)?,
            "mi_plateau_threshold" => t.aggressive.mi_plateau_threshold = parse(key, value)?,
            "max_inner_steps" => t.aggressive.max_inner_steps = parse(key, value)?,
            "epoch_eval_k" => t.epoch_eval_k = parse(key, value)?,
            "au_threshold" => t.au_threshold = parse(key, value)?,
            "final_k" => self.final_k = parse(key, value)?,
            "data" => {
                self.data = DataSource::Directory {
                    path: PathBuf::from(value.trim()),
                    max_vocab: DEFAULT_MAX_VOCAB,
                }
            }
            "max_vocab" => match &mut self.data {
                DataSource::Directory { max_vocab, .. } => *max_vocab = parse(key, value)?,
                DataSource::Synthetic { .. } => return Err(Error::config("max_vocab applies only to a data directory")),
            },
            "corpus_seed" | "train_size" | "valid_size" | "test_size" | "sharpness" | "cluster_weight" => {
                match &mut self.data {
                    DataSource::Synthetic { seed, sizes, params } => match key {
                        "corpus_seed" => *seed = parse(key, value)?,
                        "train_size" => sizes.train = parse(key, value)?,
                        "valid_size" => sizes.valid = parse(key, value)?,
                        "test_size" => sizes.test = parse(key, value)?,
                        "sharpness" => params.sharpness = parse(key, value)?,
                        _ => params.cluster_weight = parse(key, value)?,
                    },
                    DataSource::Directory { .. } => {
                        return Err(Error::config(format!("{key} applies only to the synthetic corpus")))
                    }
                }
            }
            other => return Err(Error::config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Apply settings in iteration order.
    pub fn apply<'a>(&mut self, settings: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in settings {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.final_k == 0 {
            return Err(Error::config("final_k must be at least 1"));
        }
        Ok(())
    }
}

/// Parse a config file: a JSON object of scalars, or `key = value` lines
/// with `#` comments. Lines apply in file order (a repeated key ends with
/// its last value); JSON keys apply in sorted order.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(trimmed)
            .map_err(|e| Error::config(format!("config file is not a JSON object: {e}")))?;
        return map
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    other => return Err(Error::config(format!("config key {k:?} needs a scalar, got {other}"))),
                };
                Ok((k, s))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub recipe: Recipe,
    pub aggregation: AggregationMethod,
    pub seed: u64,
    pub model: ModelConfig,
    pub num_params: usize,
    pub spec: RunSpec,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_val_bound: f64,
    pub stopped_early: bool,
    pub aggressive_exit_epoch: Option<usize>,
    pub total_updates: u64,
    pub skipped_updates: u64,
    /// Validation metrics of the selected (checkpointed) model.
    pub final_valid: MetricsReport,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub log: TrainLog,
    pub model: VaeModel,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Train according to `spec`, writing the run directory to `out` when
/// given. The best checkpoint is on disk as soon as it exists, so an
/// aborted run still leaves one.
pub fn run(spec: &RunSpec, out: Option<&Path>) -> Result<RunOutput> {
    spec.validate()?;
    let (vocab, corpus) = spec.data.load(None)?;
    let config = spec.model_config(vocab.len());
    let mut model = VaeModel::new(config.clone(), spec.train.seed)?;
    let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        vocab.save(&dir.join(VOCAB_FILE))?;
    }
    let sink = CheckpointSink {
        path: ckpt_path.as_deref(),
        meta: serde_json::json!({ "spec": spec }),
    };
    let outcome = train::train(&mut model, &corpus, &spec.train, sink)?;
    let eval = EvalConfig {
        k: spec.final_k,
        au_threshold: spec.train.au_threshold,
        seed: spec.train.seed,
        ..EvalConfig::default()
    };
    let final_valid = metrics::evaluate(&outcome.best_model, &corpus.valid, Split::Valid, &eval)?;
    let log = outcome.log;
    let summary = RunSummary {
        format_version: SUMMARY_FORMAT_VERSION,
        recipe: spec.recipe,
        aggregation: config.aggregation,
        seed: spec.train.seed,
        num_params: config.num_params(),
        model: config,
        spec: spec.clone(),
        epochs_completed: log.records.len(),
        best_epoch: log.best_epoch,
        best_val_bound: log.best_bound,
        stopped_early: log.stopped_early,
        aggressive_exit_epoch: log.aggressive_exit_epoch,
        total_updates: log.total_updates(),
        skipped_updates: log.skipped_updates(),
        final_valid,
    };
    if let Some(dir) = out {
        log.write_csv(&dir.join(LOG_FILE))?;
        write_json(&summary, &dir.join(SUMMARY_FILE))?;
    }
    Ok(RunOutput {
        summary,
        log,
        model: outcome.best_model,
    })
}

/// Load a checkpoint together with the corpus it was trained on. The data
/// comes from `data` when given, else from the spec stored in the
/// checkpoint; a `vocab.txt` next to the checkpoint is reused.
pub fn load_checkpoint_with_data(ckpt: &Path, data: Option<&Path>) -> Result<(VaeModel, CheckpointHeader, Vocab, Corpus)> {
    let (model, header) = checkpoint::load(ckpt)?;
    let vocab_path = ckpt.parent().map(|p| p.join(VOCAB_FILE));
    let vocab = match &vocab_path {
        Some(p) if p.exists() => Some(Vocab::load(p)?),
        _ => None,
    };
    let source = match data {
        Some(dir) => DataSource::Directory {
            path: dir.to_path_buf(),
            max_vocab: DEFAULT_MAX_VOCAB,
        },
        None => header
            .meta
            .get("spec")
            .and_then(|s| s.get("data"))
            .map(|d| serde_json::from_value::<DataSource>(d.clone()))
            .transpose()?
            .ok_or_else(|| Error::config("checkpoint does not record its data source; pass --data"))?,
    };
    let (vocab, corpus) = source.load(vocab)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    corpus.validate(vocab.len())?;
    Ok((model, header, vocab, corpus))
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub nll: f64,
    pub kl: f64,
    pub mi: f64,
    pub au: usize,
    pub cosine: f64,
    pub updates: u64,
}

pub const COMPARE_HEADER: [&str; 7] = ["run", "NLL", "KL", "MI", "AU", "cosine", "updates"];

pub fn compare_rows(dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    dirs.iter()
        .map(|dir| {
            let path = dir.join(SUMMARY_FILE);
            if !dir.is_dir() {
                return Err(Error::config(format!("run directory {} does not exist", dir.display())));
            }
            if !path.is_file() {
                return Err(Error::config(format!("{} has no {SUMMARY_FILE}", dir.display())));
            }
            let s: RunSummary = read_json(&path)?;
            Ok(CompareRow {
                run: dir.display().to_string(),
                nll: s.final_valid.nll_iwae,
                kl: s.final_valid.kl,
                mi: s.final_valid.mi,
                au: s.final_valid.active_units,
                cosine: s.final_valid.mean_pairwise_cosine,
                updates: s.total_updates,
            })
        })
        .collect()
}

pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut s = format!(
        "{:<width$}  {:>10}  {:>8}  {:>8}  {:>4}  {:>8}  {:>9}\n",
        COMPARE_HEADER[0], COMPARE_HEADER[1], COMPARE_HEADER[2], COMPARE_HEADER[3], COMPARE_HEADER[4], COMPARE_HEADER[5], COMPARE_HEADER[6]
    );
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>10.3}  {:>8.4}  {:>8.4}  {:>4}  {:>8.4}  {:>9}\n",
            r.run, r.nll, r.kl, r.mi, r.au, r.cosine, r.updates
        ));
    }
    s
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# format_version: {SUMMARY_FORMAT_VERSION}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(COMPARE_HEADER)?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.nll.to_string(),
            r.kl.to_string(),
            r.mi.to_string(),
            r.au.to_string(),
            r.cosine.to_string(),
            r.updates.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Append a report row to `path`, writing the version comment and header
/// first when the file is new.
pub fn append_eval_csv(report: &MetricsReport, checkpoint: &str, path: &Path) -> Result<()> {
    use std::io::Write;
    let exists = path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !exists {
        writeln!(file, "# format_version: {}", metrics::REPORT_FORMAT_VERSION).map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        let mut header = vec!["checkpoint"];
        header.extend(MetricsReport::CSV_HEADER);
        w.write_record(header)?;
    }
    let mut row = vec![checkpoint.to_string()];
    row.extend(report.csv_record());
    w.write_record(row)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
