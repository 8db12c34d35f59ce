//! Variational (Fenchel-dual) estimate of `KL(q || p)`:
//! `E_q[v(x, z)] − E_p[exp v(x, z)] + 1`, a lower bound on the analytic KL
//! for every `v`, tight at `v = log q/p`.
//!
//! The conditioning signal for `v` is the posterior mean of `x`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Mlp, ParamStore};
use crate::rng::{self, streams, Rng};
use crate::tensor::{Graph, Tensor};
use crate::train::sgd_step;
use crate::vae::{gaussian_kl, VaeModel};

/// Values of `v` above this are clamped before `exp`.
pub const DUAL_CLAMP: f64 = 30.0;
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let e = rng::standard_normal(rng, self.dim());
        (0..self.dim())
            .map(|j| self.mu[j] + (0.5 * self.log_var[j]).exp() * e[j])
            .collect()
    }

    /// Analytic `KL(self || N(0, I))`.
    pub fn kl_to_standard(&self) -> f64 {
        gaussian_kl(&self.mu, &self.log_var)
    }
}

/// Anything that can play the auxiliary function `v(x, z)`.
pub trait DualFn {
    /// `v` for each row pair `(cond[i], z[i])`.
    fn values(&self, cond: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Adapter turning a plain function into a [`DualFn`].
pub struct FnDual<F>(pub F);

impl<F: Fn(&[f64], &[f64]) -> f64> DualFn for FnDual<F> {
    fn values(&self, cond: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(cond.iter().zip(z).map(|(c, z)| (self.0)(c, z)).collect())
    }
}

/// Learned `v`: a tanh MLP on `[cond, z]` with scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFunction {
    pub params: ParamStore,
    pub mlp: Mlp,
    pub cond_dim: usize,
    pub latent_dim: usize,
}

impl DualFunction {
    pub fn new(cond_dim: usize, latent_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut widths = vec![cond_dim + latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut rng = rng::stream(seed, streams::INIT);
        let mlp = Mlp::new(&mut params, "dual", &widths, &mut rng)?;
        Ok(Self {
            params,
            mlp,
            cond_dim,
            latent_dim,
        })
    }

    fn input(&self, cond: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Tensor> {
        if cond.len() != z.len() {
            return Err(Error::Shape {
                op: "dual input",
                lhs: vec![cond.len()],
                rhs: vec![z.len()],
            });
        }
        let rows: Vec<Vec<f64>> = cond.iter().zip(z).map(|(c, z)| [c.as_slice(), z].concat()).collect();
        if rows.iter().any(|r| r.len() != self.cond_dim + self.latent_dim) {
            return Err(Error::contract("dual input rows have the wrong width"));
        }
        Tensor::from_rows(&rows)
    }
}

impl DualFn for DualFunction {
    fn values(&self, cond: &[Vec<f64>], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g);
        let x = g.constant(self.input(cond, z)?);
        let out = self.mlp.forward(&mut g, &b, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEstimate {
    pub value: f64,
    /// Monte Carlo standard error of `value`.
    pub std_error: f64,
    /// Some sampled `v` exceeded [`DUAL_CLAMP`].
    pub saturated: bool,
    pub n_samples: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Monte Carlo dual objective for one conditioning vector, with
/// `n_samples` draws from each of `q` and `N(0, I)`.
pub fn dual_kl_estimate(
    v: &impl DualFn,
    cond: &[f64],
    q: &DiagGaussian,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<DualEstimate> {
    if n_samples == 0 {
        return Err(Error::contract("dual estimate needs at least one sample"));
    }
    let prior = DiagGaussian::standard(q.dim());
    let conds = vec![cond.to_vec(); n_samples];
    let zq: Vec<Vec<f64>> = (0..n_samples).map(|_| q.sample(rng)).collect();
    let zp: Vec<Vec<f64>> = (0..n_samples).map(|_| prior.sample(rng)).collect();
    let vq = v.values(&conds, &zq)?;
    let vp = v.values(&conds, &zp)?;
    let saturated = vp.iter().chain(&vq).any(|&x| x > DUAL_CLAMP);
    let ep: Vec<f64> = vp.iter().map(|&x| x.min(DUAL_CLAMP).exp()).collect();
    let (mq, varq) = mean_var(&vq);
    let (mp, varp) = mean_var(&ep);
    let n = n_samples as f64;
    Ok(DualEstimate {
        value: mq - mp + 1.0,
        std_error: (varq / n + varp / n).sqrt(),
        saturated,
        n_samples,
    })
}

/// One posterior to fit the dual against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualTarget {
    pub cond: Vec<f64>,
    pub posterior: DiagGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    /// Targets per step (all if fewer).
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Evaluate the estimate every this many steps (and at the first and
    /// last step).
    pub log_every: usize,
    /// Fresh samples per target at each logged evaluation.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for DualTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.01,
            grad_clip_norm: 5.0,
            batch_size: 32,
            hidden: vec![64, 64],
            log_every: 100,
            eval_samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Minibatch objective at this step (before the update).
    pub objective: f64,
    /// Fresh-sample estimate averaged over the evaluation targets.
    pub estimate: f64,
    pub std_error: f64,
    /// Mean analytic KL over the same targets.
    pub analytic_kl: f64,
    pub saturated: bool,
}

impl TraceEntry {
    /// Estimate stays below the analytic KL up to three standard errors.
    pub fn within_bound(&self) -> bool {
        self.estimate <= self.analytic_kl + 3.0 * self.std_error
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualTrace {
    pub entries: Vec<TraceEntry>,
    /// Step at which the objective became non-finite, if it did.
    pub diverged_at: Option<usize>,
}

/// Mean fresh-sample estimate over `targets`, `per_target` samples each.
pub fn mean_estimate(v: &impl DualFn, targets: &[DualTarget], per_target: usize, rng: &mut Rng) -> Result<DualEstimate> {
    let mut value = 0.0;
    let mut var = 0.0;
    let mut saturated = false;
    for t in targets {
        let e = dual_kl_estimate(v, &t.cond, &t.posterior, per_target, rng)?;
        value += e.value;
        var += e.std_error * e.std_error;
        saturated |= e.saturated;
    }
    let n = targets.len() as f64;
    Ok(DualEstimate {
        value: value / n,
        std_error: var.sqrt() / n,
        saturated,
        n_samples: per_target,
    })
}

/// Gradient ascent on the dual objective averaged over `targets`.
///
/// Returns the trace; on a non-finite objective training stops, `v` keeps
/// its last finite parameters and `diverged_at` is set.
pub fn train_dual(
    v: &mut DualFunction,
    targets: &[DualTarget],
    config: &DualTrainConfig,
    eval_targets: &[DualTarget],
) -> Result<DualTrace> {
    if targets.is_empty() || eval_targets.is_empty() {
        return Err(Error::contract("dual training needs at least one target"));
    }
    let mut rng = rng::stream(config.seed, streams::DUAL);
    let mut eval_rng = rng::stream(config.seed, streams::EVAL);
    let analytic = eval_targets.iter().map(|t| t.posterior.kl_to_standard()).sum::<f64>() / eval_targets.len() as f64;
    let mut entries = Vec::new();
    let mut diverged_at = None;
    let mut log = |v: &DualFunction, step: usize, objective: f64, entries: &mut Vec<TraceEntry>| -> Result<()> {
        let e = mean_estimate(v, eval_targets, config.eval_samples, &mut eval_rng)?;
        entries.push(TraceEntry {
            step,
            objective,
            estimate: e.value,
            std_error: e.std_error,
            analytic_kl: analytic,
            saturated: e.saturated,
        });
        Ok(())
    };

    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut cursor = order.len();
    let mut last_objective = f64::NAN;
    for step in 0..config.steps {
        let mut picked = Vec::with_capacity(config.batch_size.min(targets.len()));
        while picked.len() < config.batch_size.min(targets.len()) {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            picked.push(&targets[order[cursor]]);
            cursor += 1;
        }
        let cond: Vec<Vec<f64>> = picked.iter().map(|t| t.cond.clone()).collect();
        let zq: Vec<Vec<f64>> = picked.iter().map(|t| t.posterior.sample(&mut rng)).collect();
        let zp: Vec<Vec<f64>> = picked.iter().map(|t| DiagGaussian::standard(t.posterior.dim()).sample(&mut rng)).collect();

        let mut g = Graph::new();
        let b = v.params.bind(&mut g);
        let xq = g.constant(v.input(&cond, &zq)?);
        let xp = g.constant(v.input(&cond, &zp)?);
        let vq = v.mlp.forward(&mut g, &b, xq)?;
        let vp = v.mlp.forward(&mut g, &b, xp)?;
        let vp = g.clamp_max(vp, DUAL_CLAMP);
        let ep = g.exp(vp);
        let mq = g.mean(vq)?;
        let mp = g.mean(ep)?;
        let diff = g.sub(mq, mp)?;
        let objective = g.item(diff) + 1.0;
        if !objective.is_finite() {
            log::warn!("dual objective became non-finite at step {step}");
            diverged_at = Some(step);
            break;
        }
        if step == 0 || step % config.log_every.max(1) == 0 {
            log(v, step, objective, &mut entries)?;
        }
        let loss = g.neg(diff);
        g.backward(loss)?;
        v.params.accumulate_grads(&g, &b);
        sgd_step(&mut v.params, None, config.learning_rate, config.grad_clip_norm);
        last_objective = objective;
    }
    if diverged_at.is_none() && config.steps > 0 {
        log(v, config.steps, last_objective, &mut entries)?;
    }
    Ok(DualTrace { entries, diverged_at })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub index: usize,
    pub analytic_kl: f64,
    pub dual_estimate: f64,
    pub gap: f64,
    #[serde(skip)]
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub format_version: u32,
    pub num_items: usize,
    pub mean_analytic_kl: f64,
    pub mean_dual_estimate: f64,
    pub mean_gap: f64,
    /// Monte Carlo standard error of `mean_gap`.
    pub gap_std_error: f64,
    /// `mean_gap ≥ −3·gap_std_error`.
    pub mean_gap_ok: bool,
    /// Every logged training step stayed within three standard errors of
    /// the analytic KL.
    pub trace_ok: bool,
    pub passed: bool,
    pub saturated: bool,
    pub trace: DualTrace,
    pub config: DualTrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub summary: GapSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapConfig {
    pub dual: DualTrainConfig,
    /// Fresh samples per item for the final per-item estimates.
    pub samples_per_item: usize,
    /// Evaluate at most this many items (a prefix of the split).
    pub max_items: usize,
    /// Items used for the per-step trace estimate (a prefix).
    pub trace_items: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            dual: DualTrainConfig {
                eval_samples: 500,
                ..DualTrainConfig::default()
            },
            samples_per_item: 2000,
            max_items: 200,
            trace_items: 20,
        }
    }
}

/// Targets for a frozen model: one per item, conditioned on its posterior
/// mean.
pub fn model_targets(model: &VaeModel, items: &[Vec<usize>]) -> Result<Vec<DualTarget>> {
    let table = metrics::encode_split(model, items)?;
    Ok(table
        .mu
        .into_iter()
        .zip(table.log_var)
        .map(|(mu, log_var)| DualTarget {
            cond: mu.clone(),
            posterior: DiagGaussian { mu, log_var },
        })
        .collect())
}

/// Train a dual function against the frozen model's posteriors on `items`
/// and compare its per-item estimate with the analytic KL.
pub fn bound_gap_report(model: &VaeModel, items: &[Vec<usize>], config: &GapConfig) -> Result<GapReport> {
    let items = &items[..items.len().min(config.max_items)];
    if items.is_empty() {
        return Err(Error::contract("bound gap report needs at least one item"));
    }
    let targets = model_targets(model, items)?;
    let d = model.config.latent_dim;
    let mut v = DualFunction::new(d, d, &config.dual.hidden, config.dual.seed)?;
    let trace_targets = &targets[..targets.len().min(config.trace_items.max(1))];
    let trace = train_dual(&mut v, &targets, &config.dual, trace_targets)?;

    let mut rng = rng::stream(config.dual.seed, streams::PROBE);
    let mut rows = Vec::with_capacity(targets.len());
    let mut saturated = trace.entries.iter().any(|e| e.saturated);
    for (index, t) in targets.iter().enumerate() {
        let e = dual_kl_estimate(&v, &t.cond, &t.posterior, config.samples_per_item, &mut rng)?;
        saturated |= e.saturated;
        let analytic_kl = t.posterior.kl_to_standard();
        rows.push(GapRow {
            index,
            analytic_kl,
            dual_estimate: e.value,
            gap: analytic_kl - e.value,
            std_error: e.std_error,
        });
    }
    let n = rows.len() as f64;
    let mean_gap = rows.iter().map(|r| r.gap).sum::<f64>() / n;
    let gap_std_error = rows.iter().map(|r| r.std_error * r.std_error).sum::<f64>().sqrt() / n;
    let mean_gap_ok = mean_gap >= -3.0 * gap_std_error;
    let trace_ok = trace.diverged_at.is_none() && trace.entries.iter().all(TraceEntry::within_bound);
    let summary = GapSummary {
        format_version: REPORT_FORMAT_VERSION,
        num_items: rows.len(),
        mean_analytic_kl: rows.iter().map(|r| r.analytic_kl).sum::<f64>() / n,
        mean_dual_estimate: rows.iter().map(|r| r.dual_estimate).sum::<f64>() / n,
        mean_gap,
        gap_std_error,
        mean_gap_ok,
        trace_ok,
        passed: mean_gap_ok && trace_ok,
        saturated,
        trace,
        config: config.dual.clone(),
    };
    Ok(GapReport { rows, summary })
}

impl GapReport {
    pub const CSV_HEADER: [&'static str; 4] = ["index", "analytic_kl", "dual_estimate", "gap"];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# format_version: {REPORT_FORMAT_VERSION}").map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.analytic_kl.to_string(),
                r.dual_estimate.to_string(),
                r.gap.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
