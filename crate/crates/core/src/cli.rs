//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{synth_corpus, Split, SynthParams, SynthSizes};
use crate::dualkl::{bound_gap_report, GapConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, Recipe, RunSpec, EVAL_CSV_FILE};
use crate::metrics::{self, EvalConfig, DEFAULT_AU_THRESHOLD, DEFAULT_FINAL_K};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SEQVAE_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "seqvae", version, about = "Sequence VAE experiments: corpora, training, evaluation, dual KL checks")]
pub struct Cli {
    /// Root for default output locations (overrides $SEQVAE_OUTPUT_ROOT).
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Markov-mixture corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model from a recipe.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Fit a dual KL function to a checkpoint and check it stays below the analytic KL.
    DualKlCheck(DualKlArgs),
    /// Tabulate the summaries of several runs.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSizes::default().train)]
    pub train_size: usize,
    #[arg(long, default_value_t = SynthSizes::default().valid)]
    pub valid_size: usize,
    #[arg(long, default_value_t = SynthSizes::default().test)]
    pub test_size: usize,
    #[arg(long, default_value_t = SynthParams::default().clusters)]
    pub clusters: usize,
    #[arg(long, default_value_t = SynthParams::default().vocab)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = SynthParams::default().min_len)]
    pub min_len: usize,
    #[arg(long, default_value_t = SynthParams::default().max_len)]
    pub max_len: usize,
    #[arg(long, default_value_t = SynthParams::default().sharpness)]
    pub sharpness: f64,
    #[arg(long, default_value_t = SynthParams::default().cluster_weight)]
    pub cluster_weight: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// One of: baseline-last, worddrop, cosreg, avgpool, maxpool, abspool,
    /// aggressive, cyclical, no-anneal, toy3d.
    #[arg(long)]
    pub recipe: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corpus directory (train.txt, valid.txt, test.txt); the synthetic
    /// corpus is used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; defaults to <output root>/<recipe>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Settings file: `key = value` lines or a JSON object. Flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model size preset: default or toy3d.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub anneal: Option<String>,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lambda_cos: Option<f64>,
    #[arg(long)]
    pub word_dropout: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Any other setting, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory; defaults to the data recorded in the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    pub split: String,
    /// Importance samples per sequence.
    #[arg(long = "K", visible_alias = "k", default_value_t = DEFAULT_FINAL_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_AU_THRESHOLD)]
    pub au_threshold: f64,
    /// Directory for the report files; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DualKlArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    pub split: String,
    #[arg(long, default_value_t = GapConfig::default().dual.steps)]
    pub steps: usize,
    #[arg(long, default_value_t = GapConfig::default().dual.learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = GapConfig::default().max_items)]
    pub max_items: usize,
    #[arg(long, default_value_t = GapConfig::default().samples_per_item)]
    pub samples_per_item: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories containing summary.json.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV destination; defaults to <output root>/compare.csv.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parse `args` (program name first) and run. `env_root` stands in for
/// the output-root environment variable.
pub fn run_with<I, T>(args: I, env_root: Option<PathBuf>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let root = cli
        .output_root
        .clone()
        .or(env_root)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    match dispatch(cli.command, &root) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// [`run_with`] using the process arguments and environment.
pub fn run() -> i32 {
    run_with(std::env::args_os(), std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(command: Command, root: &Path) -> Result<i32> {
    match command {
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::Train(a) => train(&a, root),
        Command::Evaluate(a) => evaluate(&a),
        Command::DualKlCheck(a) => dual_kl_check(&a),
        Command::Compare(a) => compare(&a, root),
    }
}

#[derive(Serialize)]
struct CorpusInfo<'a> {
    format_version: u32,
    seed: u64,
    sizes: SynthSizes,
    params: &'a SynthParams,
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<i32> {
    let params = SynthParams {
        clusters: a.clusters,
        vocab: a.vocab_size,
        min_len: a.min_len,
        max_len: a.max_len,
        sharpness: a.sharpness,
        cluster_weight: a.cluster_weight,
    };
    let sizes = SynthSizes {
        train: a.train_size,
        valid: a.valid_size,
        test: a.test_size,
    };
    let s = synth_corpus(a.seed, sizes, &params)?;
    s.corpus.write_dir(&a.out, &s.vocab)?;
    s.vocab.save(&a.out.join(experiment::VOCAB_FILE))?;
    let info = CorpusInfo {
        format_version: 1,
        seed: a.seed,
        sizes,
        params: &params,
    };
    experiment::write_json(&info, &a.out.join("corpus.json"))?;
    println!("wrote corpus to {}", a.out.display());
    Ok(EXIT_OK)
}

/// Recipe defaults, then the config file, then flags.
pub fn resolve_spec(a: &TrainArgs) -> Result<RunSpec> {
    let file_settings = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            experiment::parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    let file_value = |key: &str| file_settings.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let recipe: Recipe = match (a.recipe.clone(), file_value("recipe")) {
        (Some(r), _) | (None, Some(r)) => r.parse()?,
        (None, None) => Recipe::BaselineLast,
    };
    let mut spec = recipe.spec(0);
    for (k, v) in &file_settings {
        if k != "recipe" {
            spec.set(k, v)?;
        }
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = a.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = &a.data {
        flags.push(("data", v.display().to_string()));
    }
    if let Some(v) = &a.size {
        flags.push(("size", v.clone()));
    }
    if let Some(v) = &a.aggregation {
        flags.push(("aggregation", v.clone()));
    }
    if let Some(v) = &a.anneal {
        flags.push(("anneal", v.clone()));
    }
    if let Some(v) = &a.scheme {
        flags.push(("scheme", v.clone()));
    }
    if let Some(v) = a.max_epochs {
        flags.push(("max_epochs", v.to_string()));
    }
    if let Some(v) = a.lambda_cos {
        flags.push(("lambda_cos", v.to_string()));
    }
    if let Some(v) = a.word_dropout {
        flags.push(("word_dropout", v.to_string()));
    }
    if let Some(v) = a.learning_rate {
        flags.push(("learning_rate", v.to_string()));
    }
    if let Some(v) = a.batch_size {
        flags.push(("batch_size", v.to_string()));
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        flags.push((k.trim(), v.trim().to_string()));
    }
    for (k, v) in &flags {
        spec.set(k, v)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn train(a: &TrainArgs, root: &Path) -> Result<i32> {
    let spec = resolve_spec(a)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("{}-seed{}", spec.recipe, spec.train.seed)));
    let result = experiment::run(&spec, Some(&out))?;
    let r = &result.summary.final_valid;
    println!(
        "{}: epochs {} best {} | valid NLL {:.3} KL {:.4} MI {:.4} AU {} cosine {:.4} | updates {}",
        out.display(),
        result.summary.epochs_completed,
        result.summary.best_epoch,
        r.nll_iwae,
        r.kl,
        r.mi,
        r.active_units,
        r.mean_pairwise_cosine,
        result.summary.total_updates
    );
    Ok(EXIT_OK)
}

fn output_dir(out: &Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("checkpoint {} does not exist", path.display())))
    }
}

fn evaluate(a: &EvaluateArgs) -> Result<i32> {
    require_file(&a.checkpoint)?;
    let split: Split = a.split.parse()?;
    if a.k == 0 {
        return Err(Error::config("--K must be at least 1"));
    }
    let (model, _, _, corpus) = experiment::load_checkpoint_with_data(&a.checkpoint, a.data.as_deref())?;
    let cfg = EvalConfig {
        k: a.k,
        au_threshold: a.au_threshold,
        seed: a.seed,
        ..EvalConfig::default()
    };
    let report = metrics::evaluate(&model, corpus.split(split), split, &cfg)?;
    let dir = output_dir(&a.out, &a.checkpoint);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    experiment::write_json(&report, &dir.join(format!("eval_{split}.json")))?;
    experiment::append_eval_csv(&report, &a.checkpoint.display().to_string(), &dir.join(EVAL_CSV_FILE))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(EXIT_OK)
}

fn dual_kl_check(a: &DualKlArgs) -> Result<i32> {
    require_file(&a.checkpoint)?;
    let split: Split = a.split.parse()?;
    let (model, _, _, corpus) = experiment::load_checkpoint_with_data(&a.checkpoint, a.data.as_deref())?;
    let mut cfg = GapConfig {
        samples_per_item: a.samples_per_item,
        max_items: a.max_items,
        ..GapConfig::default()
    };
    cfg.dual.steps = a.steps;
    cfg.dual.learning_rate = a.learning_rate;
    cfg.dual.seed = a.seed;
    let report = bound_gap_report(&model, corpus.split(split), &cfg)?;
    let dir = output_dir(&a.out, &a.checkpoint);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    report.write_csv(&dir.join("dual_kl.csv"))?;
    experiment::write_json(&report.summary, &dir.join("dual_kl.json"))?;
    let s = &report.summary;
    println!(
        "items {} | analytic KL {:.5} dual {:.5} gap {:.5} ± {:.5} | trace within bound: {} | {}",
        s.num_items,
        s.mean_analytic_kl,
        s.mean_dual_estimate,
        s.mean_gap,
        s.gap_std_error,
        s.trace_ok,
        if s.passed { "PASS" } else { "FAIL" }
    );
    Ok(if s.passed { EXIT_OK } else { EXIT_FAILURE })
}

fn compare(a: &CompareArgs, root: &Path) -> Result<i32> {
    let rows = experiment::compare_rows(&a.runs)?;
    print!("{}", experiment::format_compare_table(&rows));
    let csv = a.csv.clone().unwrap_or_else(|| root.join("compare.csv"));
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    experiment::write_compare_csv(&rows, &csv)?;
    Ok(EXIT_OK)
}
