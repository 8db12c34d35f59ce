//! Worked examples for every module, each returning pass/fail with detail so
//! both the test suite and the acceptance report can run them.

use std::panic::{catch_unwind, AssertUnwindSafe};

use seqvae::aggregate::aggregate;
use seqvae::cli::{Cli, Command};
use seqvae::data::{batches, synth_corpus, Batch, Corpus, SynthParams, SynthSizes, Vocab, BOS, UNK};
use seqvae::dualkl::{
    dual_kl_estimate, train_dual, DiagGaussian, DualFunction, DualTarget, DualTrainConfig, FnDual, GapReport,
};
use seqvae::metrics::{
    active_units_of, dispersion_of, evaluate, iwae_nll, mutual_information_of, EvalConfig, MetricsReport,
};
use seqvae::nn::{LstmCell, ParamStore};
use seqvae::rng;
use seqvae::schedule::AnnealSchedule;
use seqvae::tensor::log_sum_exp;
use seqvae::train::{sgd_step, train, CheckpointSink, Scheme, TrainConfig};
use seqvae::vae::{analytic_kl, cosine_penalty, gaussian_kl, reparameterize, GaussianPosterior};
use seqvae::{AggregationMethod, Graph, ModelConfig, Tensor, VaeModel};

pub struct Check {
    pub name: String,
    pub outcome: Result<(), String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

pub fn run(name: &str, f: impl FnOnce() -> Result<(), String>) -> Check {
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    Check {
        name: name.to_string(),
        outcome,
    }
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b} (tol {tol})"))
}

fn small_config(aggregation: AggregationMethod) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        embed_dim: 3,
        hidden_dim: 4,
        latent_dim: 2,
        aggregation,
    }
}

fn tiny_corpus() -> Corpus {
    let params = SynthParams {
        vocab: 3,
        min_len: 2,
        max_len: 5,
        ..SynthParams::default()
    };
    let sizes = SynthSizes {
        train: 40,
        valid: 12,
        test: 4,
    };
    synth_corpus(3, sizes, &params).unwrap().corpus
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        batch_size: 8,
        epoch_eval_k: 3,
        ..TrainConfig::default()
    }
}

fn value_of(f: impl FnOnce(&mut Graph) -> seqvae::Var) -> Vec<f64> {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).data().to_vec()
}

pub fn tensor_examples() -> Vec<Check> {
    vec![
        run("matmul by identity", || {
            let out = value_of(|g| {
                let i = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
                let x = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
                g.matmul(i, x).unwrap()
            });
            ensure(out == [3.0, 4.0], || format!("{out:?}"))
        }),
        run("matmul row by column", || {
            let out = value_of(|g| {
                let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
                let b = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
                g.matmul(a, b).unwrap()
            });
            ensure(out == [11.0], || format!("{out:?}"))
        }),
        run("tanh(0) = 0", || {
            let out = value_of(|g| {
                let x = g.leaf(Tensor::scalar(0.0));
                g.tanh(x)
            });
            ensure(out == [0.0], || format!("{out:?}"))
        }),
        run("exp(log(2.5)) = 2.5", || {
            let out = value_of(|g| {
                let x = g.leaf(Tensor::scalar(2.5));
                let l = g.log(x).unwrap();
                g.exp(l)
            });
            close(out[0], 2.5, 4.0 * f64::EPSILON, "exp(log)")
        }),
        run("logsumexp([0, 0]) = ln 2", || {
            let out = value_of(|g| {
                let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
                g.logsumexp_axis(x, 1).unwrap()
            });
            close(out[0], std::f64::consts::LN_2, 1e-15, "logsumexp")?;
            close(log_sum_exp(&[0.0, 0.0]), 0.693147, 1e-6, "plain logsumexp")
        }),
        run("logsumexp([1000, 1000]) does not overflow", || {
            let out = value_of(|g| {
                let x = g.leaf(Tensor::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap());
                g.logsumexp_axis(x, 1).unwrap()
            });
            close(out[0], 1000.0 + std::f64::consts::LN_2, 1e-12, "logsumexp")
        }),
        run("max backward routes gradient to the earliest tie", || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![3], vec![3.0, 1.0, 3.0]).unwrap());
            let m = g.max_axis(x, 0).unwrap();
            g.backward(m).unwrap();
            let grad = g.grad(x).unwrap().to_vec();
            ensure(grad == [1.0, 0.0, 0.0], || format!("{grad:?}"))
        }),
        run("grad of sum(w*w) is 2w", || {
            let mut g = Graph::new();
            let w = g.leaf(Tensor::vector(vec![1.0, 2.0]));
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            let grad = g.grad(w).unwrap().to_vec();
            ensure(grad == [2.0, 4.0], || format!("{grad:?}"))
        }),
        run("constant loss has zero gradient", || {
            let mut g = Graph::new();
            let w = g.leaf(Tensor::vector(vec![1.0, 2.0]));
            let s = g.sum(w);
            let zero = g.scale(s, 0.0);
            let loss = g.add_scalar(zero, 5.0);
            g.backward(loss).unwrap();
            let grad = g.grad(w).map_or(vec![0.0, 0.0], <[f64]>::to_vec);
            ensure(grad == [0.0, 0.0], || format!("{grad:?}"))
        }),
    ]
}

fn cell_and_store(input: usize, hidden: usize, seed: u64) -> (ParamStore, LstmCell) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, 0);
    let cell = LstmCell::new(&mut store, "cell", input, hidden, &mut r);
    let mut r = rng::stream(seed, 1);
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let noise = rng::standard_normal(&mut r, n);
        store.get_mut(id).data_mut().iter_mut().zip(noise).for_each(|(x, e)| *x += 0.4 * e);
    }
    (store, cell)
}

pub fn nn_examples() -> Vec<Check> {
    vec![
        run("LSTM with zero parameters outputs zero", || {
            let (mut store, cell) = cell_and_store(3, 2, 1);
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let x = g.constant(crate::common::normal_tensor(&[2, 3], 5));
            let h = g.constant(Tensor::zeros(vec![2, 2]));
            let c = g.constant(Tensor::zeros(vec![2, 2]));
            let (h1, _) = cell.step(&mut g, &b, x, h, c).unwrap();
            ensure(g.value(h1).data().iter().all(|&v| v == 0.0), || format!("{:?}", g.value(h1).data()))
        }),
        run("two steps equal the unrolled sequence", || {
            let (store, cell) = cell_and_store(3, 4, 2);
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let x1 = g.constant(crate::common::normal_tensor(&[2, 3], 6));
            let x2 = g.constant(crate::common::normal_tensor(&[2, 3], 7));
            let h0 = g.constant(Tensor::zeros(vec![2, 4]));
            let c0 = g.constant(Tensor::zeros(vec![2, 4]));
            let (h1, c1) = cell.step(&mut g, &b, x1, h0, c0).unwrap();
            let (h2, _) = cell.step(&mut g, &b, x2, h1, c1).unwrap();
            let states = cell.run_sequence(&mut g, &b, &[x1, x2], &[2, 2], (h0, c0)).unwrap();
            ensure(g.value(states[1]).data() == g.value(h2).data(), || "unrolled states differ".into())
        }),
        run("B=1, T=1 sequence equals one step", || {
            let (store, cell) = cell_and_store(3, 4, 3);
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let x = g.constant(crate::common::normal_tensor(&[1, 3], 8));
            let h0 = g.constant(Tensor::zeros(vec![1, 4]));
            let c0 = g.constant(Tensor::zeros(vec![1, 4]));
            let (h1, _) = cell.step(&mut g, &b, x, h0, c0).unwrap();
            let states = cell.run_sequence(&mut g, &b, &[x], &[1], (h0, c0)).unwrap();
            ensure(states.len() == 1 && g.value(states[0]).data() == g.value(h1).data(), || "mismatch".into())
        }),
        run("lengths (3, 1): padded positions never reach any aggregation", || {
            let m = VaeModel::new(small_config(AggregationMethod::LastHidden), 4).unwrap();
            let batch = Batch::new(&[&[4, 5, 6], &[6]], vec![0, 1]).unwrap();
            let mut g = Graph::new();
            let b = m.params.bind(&mut g);
            let states = m.encoder_states(&mut g, &b, &batch).unwrap();
            let mut rows: Vec<f64> = Vec::new();
            for (t, &s) in states.iter().enumerate() {
                let _ = t;
                rows.extend_from_slice(g.value(s).data());
            }
            // rows are [T][B][H]; rebuild [B][T][H] with garbage in row 2's padded steps
            let (t_len, h) = (3, 4);
            let mut data = vec![0.0; 2 * t_len * h];
            for t in 0..t_len {
                for bi in 0..2 {
                    for k in 0..h {
                        let v = if bi == 1 && t >= 1 { 1e6 } else { rows[(t * 2 + bi) * h + k] };
                        data[(bi * t_len + t) * h + k] = v;
                    }
                }
            }
            let first_state: Vec<f64> = g.value(states[0]).data()[h..2 * h].to_vec();
            for method in AggregationMethod::ALL {
                let mut g2 = Graph::new();
                let x = g2.leaf(Tensor::new(vec![2, t_len, h], data.clone()).unwrap());
                let y = aggregate(&mut g2, x, &batch.lengths, method).unwrap();
                let out = g2.value(y).row(1).to_vec();
                ensure(out == first_state, || format!("{method}: {out:?} vs {first_state:?}"))?;
            }
            Ok(())
        }),
        run("every aggregation is the identity at T=1", || {
            for method in AggregationMethod::ALL {
                let out = value_of(|g| {
                    let x = g.leaf(Tensor::new(vec![1, 1, 3], vec![0.5, -0.25, 2.0]).unwrap());
                    aggregate(g, x, &[1], method).unwrap()
                });
                ensure(out == [0.5, -0.25, 2.0], || format!("{method}: {out:?}"))?;
            }
            Ok(())
        }),
        run("hand-evaluated pooling of [[1,-2],[3,-1]]", || {
            let expected = [
                (AggregationMethod::MaxPool, [3.0, -1.0]),
                (AggregationMethod::AvgPool, [2.0, -1.5]),
                (AggregationMethod::AbsPool, [3.0, -2.0]),
                (AggregationMethod::LastHidden, [3.0, -1.0]),
            ];
            for (method, want) in expected {
                let out = value_of(|g| {
                    let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, -1.0]).unwrap());
                    aggregate(g, x, &[2], method).unwrap()
                });
                ensure(out == want, || format!("{method}: {out:?}"))?;
            }
            Ok(())
        }),
        run("padding holding 1e6 leaves pooled outputs unchanged", || {
            for method in AggregationMethod::ALL {
                let padded = value_of(|g| {
                    let x = g.leaf(Tensor::new(vec![2, 2, 2], vec![1.0, -2.0, 3.0, -1.0, 0.5, -0.5, 1e6, 1e6]).unwrap());
                    aggregate(g, x, &[2, 1], method).unwrap()
                });
                let alone = value_of(|g| {
                    let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![0.5, -0.5]).unwrap());
                    aggregate(g, x, &[1], method).unwrap()
                });
                ensure(padded[2..] == alone[..], || format!("{method}: {padded:?}"))?;
            }
            Ok(())
        }),
    ]
}

fn posterior_vars(g: &mut Graph, mu: Vec<f64>, log_var: Vec<f64>) -> GaussianPosterior {
    let d = mu.len();
    GaussianPosterior {
        mu: g.leaf(Tensor::new(vec![1, d], mu).unwrap()),
        log_var: g.leaf(Tensor::new(vec![1, d], log_var).unwrap()),
    }
}

fn cosine_of(rows: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(rows).unwrap());
    let c = cosine_penalty(&mut g, x).unwrap();
    g.item(c)
}

pub fn vae_examples() -> Vec<Check> {
    vec![
        run("zero heads give N(0, I) for every input", || {
            let mut m = VaeModel::new(small_config(AggregationMethod::MaxPool), 1).unwrap();
            m.zero_posterior_heads();
            let batch = Batch::new(&[&[4, 5], &[6, 6, 5]], vec![0, 1]).unwrap();
            let enc = m.encode_values(&batch).unwrap();
            ensure(
                enc.mu.data().iter().chain(enc.log_var.data()).all(|&x| x == 0.0),
                || "non-zero posterior".into(),
            )
        }),
        run("last-hidden feature of a single sequence is its final state", || {
            let m = VaeModel::new(small_config(AggregationMethod::LastHidden), 2).unwrap();
            let batch = Batch::new(&[&[4, 5, 6]], vec![0]).unwrap();
            let mut g = Graph::new();
            let b = m.params.bind(&mut g);
            let states = m.encoder_states(&mut g, &b, &batch).unwrap();
            let (features, _) = m.encode(&mut g, &b, &batch).unwrap();
            ensure(g.value(features).data() == g.value(states[2]).data(), || "feature differs".into())
        }),
        run("zero noise gives z = mu", || {
            let mut g = Graph::new();
            let p = posterior_vars(&mut g, vec![0.3, -1.0], vec![0.7, -0.2]);
            let z = reparameterize(&mut g, p, &Tensor::zeros(vec![1, 2])).unwrap();
            ensure(g.value(z).data() == [0.3, -1.0], || format!("{:?}", g.value(z).data()))
        }),
        run("unit variance gives z = mu + noise", || {
            let mut g = Graph::new();
            let p = posterior_vars(&mut g, vec![0.3, -1.0], vec![0.0, 0.0]);
            let z = reparameterize(&mut g, p, &Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap()).unwrap();
            ensure(g.value(z).data() == [0.8, 1.0], || format!("{:?}", g.value(z).data()))
        }),
        run("KL of the prior is 0", || {
            let mut g = Graph::new();
            let p = posterior_vars(&mut g, vec![0.0, 0.0], vec![0.0, 0.0]);
            let kl = analytic_kl(&mut g, p).unwrap();
            ensure(g.value(kl).data() == [0.0], || format!("{:?}", g.value(kl).data()))
        }),
        run("KL of mu=[1,0], unit variance is 0.5", || {
            let mut g = Graph::new();
            let p = posterior_vars(&mut g, vec![1.0, 0.0], vec![0.0, 0.0]);
            let kl = analytic_kl(&mut g, p).unwrap();
            ensure(g.value(kl).data() == [0.5], || format!("{:?}", g.value(kl).data()))
        }),
        run("dropout 0 gives a deterministic NLL", || {
            let m = VaeModel::new(small_config(AggregationMethod::AvgPool), 3).unwrap();
            let batch = Batch::new(&[&[4, 5], &[6, 6, 5]], vec![0, 1]).unwrap();
            let z = Tensor::new(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
            let nll = |seed: u64| {
                let mut g = Graph::new();
                let b = m.params.bind(&mut g);
                let z = g.constant(z.clone());
                let mut r = rng::stream(seed, 0);
                let v = m.decode_teacher_forced(&mut g, &b, z, &batch, 0.0, &mut r).unwrap();
                g.value(v).data().to_vec()
            };
            ensure(nll(1) == nll(2), || "dropout-free NLL depends on the rng".into())
        }),
        run("dropout 1 replaces every decoder input after BOS with UNK", || {
            let batch = Batch::new(&[&[4, 5], &[6, 6, 5]], vec![0, 1]).unwrap();
            let mut r = rng::stream(0, 0);
            let input = batch.dropped_dec_input(1.0, &mut r).unwrap();
            let td = batch.dec_len();
            for (i, &len) in batch.lengths.iter().enumerate() {
                ensure(input[i * td] == BOS, || "BOS replaced".into())?;
                ensure(input[i * td + 1..i * td + 1 + len].iter().all(|&t| t == UNK), || format!("{input:?}"))?;
            }
            let clean = Batch::new(&[&[4, 5], &[6, 6, 5]], vec![0, 1]).unwrap();
            ensure(batch.dec_target == clean.dec_target, || "targets changed".into())
        }),
        run("uniform output head gives NLL = (length + 1) ln V", || {
            let mut m = VaeModel::new(small_config(AggregationMethod::LastHidden), 4).unwrap();
            for id in [m.output_head.weight, m.output_head.bias] {
                m.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
            let batch = Batch::new(&[&[4, 5], &[6, 6, 5]], vec![0, 1]).unwrap();
            let ll = m.log_likelihood(&batch, &Tensor::zeros(vec![2, 2])).unwrap();
            let v = 7f64.ln();
            close(-ll[0], 3.0 * v, 1e-12, "row 0")?;
            close(-ll[1], 4.0 * v, 1e-12, "row 1")
        }),
        run("cosine of two identical rows is 1", || close(cosine_of(&[vec![2.0, 1.0], vec![2.0, 1.0]]), 1.0, 1e-7, "cos")),
        run("cosine of orthogonal rows is 0", || close(cosine_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 0.0, 0.0, "cos")),
        run("cosine of [1,0],[0,1],[-1,0] is -1/3", || {
            close(cosine_of(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]), -1.0 / 3.0, 1e-7, "cos")
        }),
        run("beta 0, lambda 0: total is the reconstruction loss", || {
            let m = VaeModel::new(small_config(AggregationMethod::MaxPool), 5).unwrap();
            let batch = Batch::new(&[&[4, 5], &[6, 6, 5]], vec![0, 1]).unwrap();
            let mut g = Graph::new();
            let b = m.params.bind(&mut g);
            let mut r = rng::stream(1, 0);
            let out = m.loss(&mut g, &b, &batch, 0.0, 0.0, 0.0, &mut r).unwrap();
            ensure(out.breakdown.total == out.breakdown.reconstruction_nll, || format!("{:?}", out.breakdown))
        }),
        run("beta 1, lambda 0: total is the negative single-sample ELBO", || {
            let m = VaeModel::new(small_config(AggregationMethod::MaxPool), 5).unwrap();
            let batch = Batch::new(&[&[4, 5], &[6, 6, 5]], vec![0, 1]).unwrap();
            let mut g = Graph::new();
            let b = m.params.bind(&mut g);
            let mut r = rng::stream(1, 0);
            let out = m.loss(&mut g, &b, &batch, 1.0, 0.0, 0.0, &mut r).unwrap();
            let bd = &out.breakdown;
            close(bd.total, bd.reconstruction_nll + bd.kl, 1e-12, "total")
        }),
    ]
}

/// Independent reading of the cyclical schedule: walk the steps, restarting
/// a counter at each cycle boundary.
fn cyclical_by_enumeration(cycles: u64, total: u64, ramp: f64, step: u64) -> f64 {
    let period = total as f64 / cycles as f64;
    let mut start = 0.0;
    let mut s = 0u64;
    loop {
        if (s as f64) >= start + period {
            start += period;
        }
        if s == step {
            let tau = (s as f64 - start) / period;
            return if tau <= ramp { tau / ramp } else { 1.0 };
        }
        s += 1;
    }
}

pub fn schedule_examples() -> Vec<Check> {
    vec![
        run("linear warmup endpoints", || {
            let s = AnnealSchedule::linear(1000).unwrap();
            ensure(
                s.beta_at(0) == 0.0 && s.beta_at(1000) == 1.0 && s.beta_at(5000) == 1.0,
                || "endpoint mismatch".into(),
            )
        }),
        run("linear warmup at a quarter", || {
            ensure(AnnealSchedule::linear(1000).unwrap().beta_at(250) == 0.25, || "not 0.25".into())
        }),
        run("cyclical schedule against step-by-step enumeration", || {
            let s = AnnealSchedule::cyclical(2, 1000, 0.5).unwrap();
            for (step, want) in [(0, 0.0), (250, 1.0), (499, 1.0), (500, 0.0)] {
                ensure(s.beta_at(step) == want, || format!("step {step}: {}", s.beta_at(step)))?;
            }
            for step in 0..1000 {
                let want = cyclical_by_enumeration(2, 1000, 0.5, step);
                close(s.beta_at(step), want, 1e-12, &format!("step {step}"))?;
            }
            Ok(())
        }),
    ]
}

fn store_with(values: &[f64], grads: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::vector(values.to_vec()));
    s.get_mut(id).grad_mut().copy_from_slice(grads);
    s
}

pub fn train_examples() -> Vec<Check> {
    vec![
        run("zero gradient leaves parameters unchanged", || {
            let mut s = store_with(&[1.5, -2.0], &[0.0, 0.0]);
            sgd_step(&mut s, None, 0.3, 5.0);
            let id = s.find("p").unwrap();
            ensure(s.get(id).data() == [1.5, -2.0], || format!("{:?}", s.get(id).data()))
        }),
        run("p=1, grad=2, lr=0.1 steps to 0.8", || {
            let mut s = store_with(&[1.0], &[2.0]);
            sgd_step(&mut s, None, 0.1, f64::INFINITY);
            close(s.get(s.find("p").unwrap()).item(), 0.8, 1e-15, "p")
        }),
        run("gradient of norm 10 clipped to 1 moves lr*1", || {
            let mut s = store_with(&[0.0, 0.0], &[6.0, 8.0]);
            sgd_step(&mut s, None, 0.5, 1.0);
            let d = s.get(s.find("p").unwrap()).data().to_vec();
            close((d[0] * d[0] + d[1] * d[1]).sqrt(), 0.5, 1e-12, "update norm")
        }),
        run("0 epochs returns an empty log and the initial model", || {
            let corpus = tiny_corpus();
            let mut m = VaeModel::new(small_config(AggregationMethod::LastHidden), 1).unwrap();
            let initial = m.quantized();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            let cfg = TrainConfig {
                max_epochs: 0,
                ..tiny_train_config()
            };
            let sink = CheckpointSink {
                path: Some(&path),
                ..CheckpointSink::default()
            };
            let out = train(&mut m, &corpus, &cfg, sink).unwrap();
            ensure(out.log.records.is_empty(), || "log not empty".into())?;
            ensure(out.best_model == initial, || "best model differs from the initial one".into())?;
            let (saved, _) = seqvae::checkpoint::load(&path).unwrap();
            ensure(saved.params == initial.params, || "checkpoint differs".into())
        }),
        run("fixed seed gives a bitwise-identical log", || {
            let corpus = tiny_corpus();
            let dir = tempfile::tempdir().unwrap();
            let mut logs = Vec::new();
            for i in 0..2 {
                let mut m = VaeModel::new(small_config(AggregationMethod::MaxPool), 1).unwrap();
                let out = train(&mut m, &corpus, &tiny_train_config(), CheckpointSink::default()).unwrap();
                let p = dir.path().join(format!("log{i}.csv"));
                out.log.write_csv(&p).unwrap();
                logs.push(std::fs::read(&p).unwrap());
            }
            ensure(logs[0] == logs[1], || "logs differ".into())
        }),
        run("window 1 with a probe that never improves alternates encoder and decoder updates", || {
            let corpus = tiny_corpus();
            let mut m = VaeModel::new(small_config(AggregationMethod::LastHidden), 1).unwrap();
            // a vanishing step size leaves the probe loss exactly unchanged
            let mut cfg = TrainConfig {
                max_epochs: 1,
                learning_rate: 1e-300,
                scheme: Scheme::Aggressive,
                ..tiny_train_config()
            };
            cfg.aggressive.inner_batch_window = 1;
            let out = train(&mut m, &corpus, &cfg, CheckpointSink::default()).unwrap();
            let outer = corpus.train.len().div_ceil(cfg.batch_size) as u64;
            ensure(out.log.total_updates() == 2 * outer, || format!("{} updates for {outer} batches", out.log.total_updates()))
        }),
        run("aggressive scheme makes at least as many updates", || {
            let corpus = tiny_corpus();
            let count = |scheme| {
                let mut m = VaeModel::new(small_config(AggregationMethod::LastHidden), 1).unwrap();
                let cfg = TrainConfig {
                    scheme,
                    ..tiny_train_config()
                };
                train(&mut m, &corpus, &cfg, CheckpointSink::default()).unwrap().log.total_updates()
            };
            let (a, s) = (count(Scheme::Aggressive), count(Scheme::Standard));
            ensure(a >= s, || format!("aggressive {a} < standard {s}"))
        }),
    ]
}

fn z_blind_prior_model() -> VaeModel {
    let mut m = crate::common::toy_model(small_config(AggregationMethod::AvgPool), 9, 0.5);
    m.zero_posterior_heads();
    let (e, d, h) = (m.config.embed_dim, m.config.latent_dim, m.config.hidden_dim);
    m.params.get_mut(m.latent_to_state.weight).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let w = m.params.get_mut(m.decoder.w_ih).data_mut();
    for row in 0..4 * h {
        for col in e..e + d {
            w[row * (e + d) + col] = 0.0;
        }
    }
    m
}

pub fn metrics_examples() -> Vec<Check> {
    vec![
        run("K=1 estimate is the negative ELBO of the same draw", || {
            let m = crate::common::toy_model(small_config(AggregationMethod::MaxPool), 3, 0.5);
            let items = vec![vec![4, 5], vec![6, 5, 4]];
            let est = iwae_nll(&m, &items, 1, &mut rng::stream(1, 0)).unwrap();
            close(est.nll, -est.elbo, 1e-12, "K=1")
        }),
        run("prior posterior and z-blind decoder give the same estimate for every K", || {
            let m = z_blind_prior_model();
            let items = vec![vec![4, 5], vec![6, 5, 4]];
            let ks: Vec<f64> = [1, 5, 50]
                .iter()
                .map(|&k| iwae_nll(&m, &items, k, &mut rng::stream(k as u64, 0)).unwrap().nll)
                .collect();
            close(ks[0], ks[1], 1e-9, "K=1 vs 5")?;
            close(ks[0], ks[2], 1e-9, "K=1 vs 50")
        }),
        run("posteriors equal to the prior have MI 0", || {
            let mu = vec![vec![0.0; 2]; 50];
            let mi = mutual_information_of(&mu, &mu, &mut rng::stream(1, 0)).unwrap();
            ensure(mi.abs() < 0.05, || format!("MI {mi}"))
        }),
        run("identical posteriors at any mean have MI near 0", || {
            let mu = vec![vec![2.5, -1.0]; 50];
            let lv = vec![vec![-1.0, 0.3]; 50];
            let mi = mutual_information_of(&mu, &lv, &mut rng::stream(2, 0)).unwrap();
            ensure((0.0..0.05).contains(&mi), || format!("MI {mi}"))
        }),
        run("identical posterior means give no active units", || {
            ensure(active_units_of(&vec![vec![0.4, -1.0]; 10], 0.01) == 0, || "active".into())
        }),
        run("alternating +-1 in one dimension gives one active unit", || {
            let means: Vec<Vec<f64>> = (0..10).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.3]).collect();
            ensure(active_units_of(&means, 0.01) == 1, || "not 1".into())
        }),
        run("dispersion examples", || {
            close(dispersion_of(&vec![vec![1.0, 2.0]; 3], 1000), 1.0, 1e-7, "equal rows")?;
            close(dispersion_of(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], 1000), 0.0, 0.0, "orthogonal")?;
            close(dispersion_of(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 1000), -1.0 / 3.0, 1e-7, "three rows")
        }),
        run("untrained model with zero heads has KL 0, MI 0, AU 0", || {
            let mut m = VaeModel::new(small_config(AggregationMethod::LastHidden), 2).unwrap();
            m.zero_posterior_heads();
            let corpus = tiny_corpus();
            let cfg = EvalConfig {
                k: 3,
                ..EvalConfig::default()
            };
            let r = evaluate(&m, &corpus.valid, seqvae::data::Split::Valid, &cfg).unwrap();
            ensure(r.kl == 0.0 && r.active_units == 0 && r.mi < 0.05, || format!("{r:?}"))
        }),
        run("K=1 report satisfies nll_iwae = -elbo_bound", || {
            let m = crate::common::toy_model(small_config(AggregationMethod::AbsPool), 4, 0.5);
            let corpus = tiny_corpus();
            let cfg = EvalConfig {
                k: 1,
                ..EvalConfig::default()
            };
            let r = evaluate(&m, &corpus.valid, seqvae::data::Split::Valid, &cfg).unwrap();
            close(r.nll_iwae, -r.elbo_bound, 1e-12, "identity")
        }),
        run("report round-trips through JSON bit-exactly", || {
            let m = crate::common::toy_model(small_config(AggregationMethod::AbsPool), 4, 0.5);
            let corpus = tiny_corpus();
            let cfg = EvalConfig {
                k: 4,
                ..EvalConfig::default()
            };
            let r = evaluate(&m, &corpus.valid, seqvae::data::Split::Valid, &cfg).unwrap();
            let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            ensure(back == r, || "round trip changed the report".into())
        }),
    ]
}

pub fn dual_examples() -> Vec<Check> {
    vec![
        run("v = 0 gives an estimate of exactly 0", || {
            let q = DiagGaussian {
                mu: vec![1.0],
                log_var: vec![0.2],
            };
            let e = dual_kl_estimate(&FnDual(|_: &[f64], _: &[f64]| 0.0), &[], &q, 100, &mut rng::stream(0, 0)).unwrap();
            ensure(e.value == 0.0, || format!("{}", e.value))
        }),
        run("q = p: estimate at most 3 sigma above 0", || {
            let q = DiagGaussian::standard(1);
            let v = FnDual(|_: &[f64], z: &[f64]| (z[0]).sin() + 0.3 * z[0]);
            let e = dual_kl_estimate(&v, &[], &q, 100_000, &mut rng::stream(1, 0)).unwrap();
            ensure(e.value <= 3.0 * e.std_error, || format!("{} > 3 x {}", e.value, e.std_error))
        }),
        run("0 dual training steps leave v unchanged", || {
            let mut v = DualFunction::new(1, 1, &[8], 0).unwrap();
            let before = v.clone();
            let t = vec![DualTarget {
                cond: vec![0.0],
                posterior: DiagGaussian::standard(1),
            }];
            let cfg = DualTrainConfig {
                steps: 0,
                ..DualTrainConfig::default()
            };
            train_dual(&mut v, &t, &cfg, &t).unwrap();
            ensure(v == before, || "parameters moved".into())
        }),
        run("gap report CSV has columns index, analytic_kl, dual_estimate, gap", || {
            ensure(GapReport::CSV_HEADER == ["index", "analytic_kl", "dual_estimate", "gap"], || "header".into())
        }),
    ]
}

pub fn data_examples() -> Vec<Check> {
    vec![
        run("vocab from 'a a b' orders by frequency", || {
            let v = Vocab::build(["a a b"], 100, 1).unwrap();
            ensure(v.len() == 6 && v.id("a") < v.id("b"), || format!("{:?}", v.tokens()))
        }),
        run("min_count 2 keeps only 'a'", || {
            let v = Vocab::build(["a a b"], 100, 2).unwrap();
            ensure(v.len() == 5 && v.id("b") == UNK, || format!("{:?}", v.tokens()))
        }),
        run("encode then decode is the identity in vocabulary", || {
            let v = Vocab::build(["the cat sat", "a cat ran"], 100, 1).unwrap();
            ensure(v.decode(&v.encode("cat ran the")) == "cat ran the", || "not identity".into())
        }),
        run("same seed gives identical corpora", || {
            let p = SynthParams::default();
            let a = synth_corpus(5, SynthSizes::default(), &p).unwrap();
            let b = synth_corpus(5, SynthSizes::default(), &p).unwrap();
            ensure(a.corpus == b.corpus, || "corpora differ".into())
        }),
        run("one cluster is a plain Markov corpus", || {
            let p = SynthParams {
                clusters: 1,
                ..SynthParams::default()
            };
            let s = synth_corpus(5, SynthSizes::default(), &p).unwrap();
            ensure(s.chains.len() == 1 && s.labels.iter().flatten().all(|&c| c == 0), || "labels".into())
        }),
        run("batch size beyond the split gives one batch", || {
            let split: Vec<Vec<usize>> = (0..7).map(|i| vec![4 + i % 3; 1 + i % 4]).collect();
            ensure(batches(&split, 100, 0).unwrap().len() == 1, || "several batches".into())
        }),
        run("batches cover the split exactly once", || {
            let split: Vec<Vec<usize>> = (0..37).map(|i| vec![4 + i % 3; 1 + i % 5]).collect();
            let mut seen: Vec<usize> = batches(&split, 8, 4).unwrap().iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            ensure(seen == (0..37).collect::<Vec<_>>(), || format!("{seen:?}"))
        }),
        run("equal seeds give equal batch order", || {
            let split: Vec<Vec<usize>> = (0..37).map(|i| vec![4 + i % 3; 1 + i % 5]).collect();
            ensure(batches(&split, 8, 9).unwrap() == batches(&split, 8, 9).unwrap(), || "order differs".into())
        }),
    ]
}

pub fn all_unit_examples() -> Vec<Check> {
    let mut all = tensor_examples();
    all.extend(nn_examples());
    all.extend(vae_examples());
    all.extend(schedule_examples());
    all.extend(train_examples());
    all.extend(metrics_examples());
    all.extend(dual_examples());
    all.extend(data_examples());
    all
}

pub fn assert_all(checks: Vec<Check>) {
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|c| c.outcome.as_ref().err().map(|e| format!("{}: {e}", c.name)))
        .collect();
    assert!(failed.is_empty(), "{} failed:\n{}", failed.len(), failed.join("\n"));
}

pub fn derived_examples() -> Vec<Check> {
    vec![
        run("batched LSTM equals per-example runs within 1e-12", || {
            let m = crate::common::toy_model(small_config(AggregationMethod::LastHidden), 6, 0.3);
            let seqs: [&[usize]; 3] = [&[4, 5, 6, 4], &[6], &[5, 5, 4]];
            let batch = Batch::new(&seqs, vec![0, 1, 2]).unwrap();
            let mut g = Graph::inference();
            let b = m.params.bind(&mut g);
            let states = m.encoder_states(&mut g, &b, &batch).unwrap();
            let h = m.config.hidden_dim;
            for (i, seq) in seqs.iter().enumerate() {
                let single = Batch::new(&[*seq], vec![0]).unwrap();
                let mut g1 = Graph::inference();
                let b1 = m.params.bind(&mut g1);
                let alone = m.encoder_states(&mut g1, &b1, &single).unwrap();
                for t in 0..seq.len() {
                    let batched = &g.value(states[t]).data()[i * h..(i + 1) * h];
                    for (a, c) in batched.iter().zip(g1.value(alone[t]).data()) {
                        close(*a, *c, 1e-12, &format!("row {i} step {t}"))?;
                    }
                }
            }
            Ok(())
        }),
        run("checkpoint replays the logged validation KL within 1e-9", || {
            let corpus = tiny_corpus();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("toy.ckpt");
            let cfg = ModelConfig {
                hidden_dim: 3,
                latent_dim: 3,
                ..small_config(AggregationMethod::MaxPool)
            };
            let mut m = VaeModel::new(cfg, 2).unwrap();
            let tc = TrainConfig {
                max_epochs: 3,
                ..tiny_train_config()
            };
            let sink = CheckpointSink {
                path: Some(&path),
                ..CheckpointSink::default()
            };
            let out = train(&mut m, &corpus, &tc, sink).unwrap();
            let logged = match out.log.best_epoch {
                0 => out.log.initial.kl,
                e => out.log.records[e - 1].val.kl,
            };
            let (saved, _) = seqvae::checkpoint::load(&path).unwrap();
            let table = seqvae::metrics::encode_split(&saved, &corpus.valid).unwrap();
            close(table.mean_kl(), logged, 1e-9, "replayed KL")
        }),
        run("reparameterized sample mean within 3 SE of mu over 1e5 draws", || {
            let (mu, lv) = (vec![0.3, -1.2], vec![0.5, -1.0]);
            let n = 100_000;
            let mut g = Graph::inference();
            let mut r = rng::stream(11, 0);
            let noise = Tensor::new(vec![n, 2], rng::standard_normal(&mut r, 2 * n)).unwrap();
            let mu_b = g.leaf(Tensor::new(vec![n, 2], mu.iter().cycle().take(2 * n).copied().collect()).unwrap());
            let lv_b = g.leaf(Tensor::new(vec![n, 2], lv.iter().cycle().take(2 * n).copied().collect()).unwrap());
            let z = reparameterize(&mut g, GaussianPosterior { mu: mu_b, log_var: lv_b }, &noise).unwrap();
            let zs = g.value(z).data().to_vec();
            for j in 0..2 {
                let col: Vec<f64> = zs.iter().skip(j).step_by(2).copied().collect();
                let (mean, se) = crate::common::mean_and_se(&col);
                ensure((mean - mu[j]).abs() <= 3.0 * se, || format!("dim {j}: {mean} vs {} (se {se})", mu[j]))?;
            }
            Ok(())
        }),
        run("KL of mu=0.5, log_var=ln 0.25 matches 1e6-sample Monte Carlo", || {
            let (mu, lv) = ([0.5], [0.25f64.ln()]);
            let kl = gaussian_kl(&mu, &lv);
            let (mc, se) = crate::common::monte_carlo_kl(&mu, &lv, 1_000_000, &mut rng::stream(12, 0));
            ensure((kl - mc).abs() <= 3.0 * se, || format!("{kl} vs {mc} (se {se})"))
        }),
        run("IWAE at K=1e4 matches quadrature within 0.01 nats", || {
            let m = crate::common::iwae_toy_model();
            for token in [4usize, 5] {
                let item = vec![token];
                let exact = -crate::common::quadrature_log_likelihood(&m, &item);
                let est = iwae_nll(&m, std::slice::from_ref(&item), 10_000, &mut rng::stream(token as u64, 0)).unwrap();
                close(est.nll, exact, 0.01, &format!("token {token}"))?;
            }
            Ok(())
        }),
        run("two posteriors N(+-5, 0.01) have MI ln 2 within 0.05", || {
            let oracle = crate::common::mixture_mi_quadrature(&[-5.0, 5.0], 0.01);
            close(oracle, std::f64::consts::LN_2, 1e-6, "quadrature oracle")?;
            let mu = vec![vec![-5.0], vec![5.0]];
            let lv = vec![vec![0.01f64.ln()]; 2];
            let mut r = rng::stream(13, 0);
            // the N=2 estimator is unbiased but noisy; average independent runs
            let runs: Vec<f64> = (0..4000).map(|_| mutual_information_of(&mu, &lv, &mut r).unwrap()).collect();
            let (mean, _) = crate::common::mean_and_se(&runs);
            close(mean, oracle, 0.05, "MI")
        }),
        run("posterior means with variances {0.02, 0.005, 0.011} have 2 active units", || {
            // +-a with N=2 has unbiased variance 2a^2
            let cols = [0.02f64, 0.005, 0.011].map(|v| (v / 2.0).sqrt());
            let means = vec![cols.to_vec(), cols.iter().map(|a| -a).collect()];
            for (j, v) in [0.02, 0.005, 0.011].into_iter().enumerate() {
                let brute = (means[0][j] - means[1][j]).powi(2) / 2.0;
                close(brute, v, 1e-15, "brute-force variance")?;
            }
            ensure(active_units_of(&means, 0.01) == 2, || "not 2".into())
        }),
        run("closed-form dual v* = z - 1/2 for N(1,1) against N(0,1) gives 0.5", || {
            let q = DiagGaussian {
                mu: vec![1.0],
                log_var: vec![0.0],
            };
            let v = FnDual(|_: &[f64], z: &[f64]| z[0] - 0.5);
            let e = dual_kl_estimate(&v, &[], &q, 1_000_000, &mut rng::stream(14, 0)).unwrap();
            ensure((e.value - 0.5).abs() <= 3.0 * e.std_error, || format!("{} (se {})", e.value, e.std_error))
        }),
        run("trained 1-D dual stays under KL 0.5 and rises over training", || {
            let trace = gaussian_pair_dual_trace(7);
            for e in &trace.entries {
                ensure(e.within_bound(), || format!("step {}: {} > 0.5 + 3 x {}", e.step, e.estimate, e.std_error))?;
            }
            let est: Vec<f64> = trace.entries.iter().map(|e| e.estimate).collect();
            let q = est.len() / 4;
            let early = est[..q.max(1)].iter().sum::<f64>() / q.max(1) as f64;
            let late = est[est.len() - q.max(1)..].iter().sum::<f64>() / q.max(1) as f64;
            ensure(late > early && late > 0.3, || format!("no upward trend: {est:?}"))
        }),
        run("mean bound gap over a trained model is at least -3 SE", || {
            let corpus = tiny_corpus();
            let mut m = VaeModel::new(small_config(AggregationMethod::AvgPool), 3).unwrap();
            let out = train(&mut m, &corpus, &tiny_train_config(), CheckpointSink::default()).unwrap();
            let cfg = small_gap_config();
            let r = seqvae::dualkl::bound_gap_report(&out.best_model, &corpus.valid, &cfg).unwrap();
            ensure(r.summary.mean_gap_ok, || format!("{} < -3 x {}", r.summary.mean_gap, r.summary.gap_std_error))
        }),
        run("collapsed posterior gives a gap of about 0", || {
            let corpus = tiny_corpus();
            let mut m = VaeModel::new(small_config(AggregationMethod::AvgPool), 3).unwrap();
            m.zero_posterior_heads();
            let r = seqvae::dualkl::bound_gap_report(&m, &corpus.valid, &small_gap_config()).unwrap();
            let s = &r.summary;
            ensure(s.mean_analytic_kl == 0.0 && s.mean_gap.abs() <= 0.02 + 3.0 * s.gap_std_error, || format!("{s:?}"))
        }),
        run("validation bound after 5 epochs beats epoch 0 by the pilot threshold", || {
            let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/smoke_pilot.json");
            let pilot: serde_json::Value = seqvae::experiment::read_json(&path).unwrap();
            let threshold = pilot["threshold"].as_f64().unwrap();
            let mut spec = seqvae::experiment::Recipe::BaselineLast.spec(1);
            spec.train.max_epochs = 5;
            spec.train.epoch_eval_k = 0;
            spec.final_k = 1;
            let out = seqvae::experiment::run(&spec, None).unwrap();
            let (before, after) = (out.log.initial.bound, out.log.records[4].val.bound);
            ensure(after < before && after < threshold, || format!("{before} -> {after} (threshold {threshold})"))
        }),
        run("cluster label entropy of the default corpus is ln 4 within 0.05", || {
            let s = synth_corpus(0, SynthSizes::default(), &SynthParams::default()).unwrap();
            let mut counts = [0f64; 4];
            for &c in &s.labels[0] {
                counts[c] += 1.0;
            }
            let n: f64 = counts.iter().sum();
            let h: f64 = counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum();
            close(h, 4f64.ln(), 0.05, "entropy")
        }),
        run("token frequencies match the mixture's stationary distribution within 3 sigma", || {
            let params = SynthParams::default();
            let n = 100_000;
            let sizes = SynthSizes {
                train: n,
                valid: 1,
                test: 1,
            };
            let s = synth_corpus(21, sizes, &params).unwrap();
            let k = params.vocab;
            let mut oracle = vec![0.0; k];
            for chain in &s.chains {
                let pi = stationary_by_linear_solve(&chain.transition);
                for (o, p) in oracle.iter_mut().zip(pi) {
                    *o += p / s.chains.len() as f64;
                }
            }
            let cluster_freq: Vec<f64> = (0..params.clusters)
                .map(|c| s.labels[0].iter().filter(|&&l| l == c).count() as f64 / n as f64)
                .collect();
            // the mixture weights are themselves sampled; condition on them
            let mut conditional = vec![0.0; k];
            for (chain, w) in s.chains.iter().zip(&cluster_freq) {
                let pi = stationary_by_linear_solve(&chain.transition);
                for (o, p) in conditional.iter_mut().zip(pi) {
                    *o += w * p;
                }
            }
            let mut r = rng::stream(22, 0);
            let mut counts = vec![0usize; k];
            for seq in &s.corpus.train {
                let pos = rand::Rng::random_range(&mut r, 0..seq.len());
                counts[seq[pos] - seqvae::data::NUM_RESERVED] += 1;
            }
            for t in 0..k {
                let p = conditional[t];
                let sigma = (p * (1.0 - p) / n as f64).sqrt();
                let f = counts[t] as f64 / n as f64;
                ensure((f - p).abs() <= 3.0 * sigma, || format!("token {t}: {f} vs {p} (sigma {sigma}, mixture {})", oracle[t]))?;
            }
            Ok(())
        }),
    ]
}

fn small_gap_config() -> seqvae::dualkl::GapConfig {
    seqvae::dualkl::GapConfig {
        dual: DualTrainConfig {
            steps: 300,
            hidden: vec![16],
            eval_samples: 500,
            log_every: 50,
            ..DualTrainConfig::default()
        },
        samples_per_item: 2000,
        max_items: 12,
        trace_items: 6,
    }
}

/// Dual training against `q = N(1, 1)`, `p = N(0, 1)` (KL 0.5).
pub fn gaussian_pair_dual_trace(seed: u64) -> seqvae::dualkl::DualTrace {
    let target = DualTarget {
        cond: vec![0.0],
        posterior: DiagGaussian {
            mu: vec![1.0],
            log_var: vec![0.0],
        },
    };
    let targets = vec![target.clone(); 64];
    let cfg = DualTrainConfig {
        steps: 1500,
        hidden: vec![16],
        eval_samples: 20_000,
        log_every: 100,
        seed,
        ..DualTrainConfig::default()
    };
    let mut v = DualFunction::new(1, 1, &cfg.hidden, seed).unwrap();
    train_dual(&mut v, &targets, &cfg, &[target]).unwrap()
}

/// Stationary distribution from `(Pᵀ − I) π = 0` with the last equation
/// replaced by `Σ π = 1`.
pub fn stationary_by_linear_solve(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = transition[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    a.lu().solve(&b).expect("singular chain").iter().copied().collect()
}

fn cli(args: &[&str]) -> i32 {
    seqvae::cli::run_with(std::iter::once("seqvae").chain(args.iter().copied()), None)
}

fn parse(args: &[&str]) -> Command {
    use clap::Parser as _;
    Cli::try_parse_from(std::iter::once("seqvae").chain(args.iter().copied())).unwrap().command
}

fn p(path: &std::path::Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small_corpus_flags() -> [&'static str; 8] {
    ["--train-size", "60", "--valid-size", "20", "--test-size", "10", "--max-len", "10"]
}

/// gen-corpus, train, evaluate, dual-kl-check and compare on a small corpus,
/// all writing below `root`. Returns the exit codes.
pub fn cli_session(root: &std::path::Path) -> Vec<i32> {
    let data = root.join("data");
    let run = root.join("run");
    let ckpt = run.join("model.ckpt");
    let mut codes = Vec::new();
    let mut gen = vec!["gen-corpus", "--seed", "5", "--out", p(&data)];
    gen.extend(small_corpus_flags());
    codes.push(cli(&gen));
    codes.push(cli(&[
        "train", "--recipe", "maxpool", "--seed", "1", "--data", p(&data), "--out", p(&run), "--max-epochs", "2",
        "--batch-size", "8", "--set", "final_k=3", "--set", "epoch_eval_k=2",
    ]));
    codes.push(cli(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--K", "4"]));
    codes.push(cli(&[
        "dual-kl-check", "--checkpoint", p(&ckpt), "--data", p(&data), "--steps", "50", "--max-items", "8",
        "--samples-per-item", "200",
    ]));
    codes.push(cli(&["compare", p(&run), "--csv", p(&root.join("compare.csv"))]));
    codes
}

fn untrained_fixture() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/untrained/model.ckpt")
}

pub fn cli_examples() -> Vec<Check> {
    vec![
        run("gen-corpus --seed 7 twice writes identical files", || {
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            for d in [&a, &b] {
                ensure(cli(&["gen-corpus", "--seed", "7", "--out", p(d.path())]) == 0, || "non-zero exit".into())?;
            }
            ensure(snapshot(a.path()) == snapshot(b.path()), || "files differ".into())
        }),
        run("gen-corpus without --out exits 2", || {
            let code = cli(&["gen-corpus", "--seed", "7"]);
            ensure(code == 2, || format!("exit {code}"))
        }),
        run("gen-corpus defaults write train.txt, valid.txt and test.txt", || {
            let d = tempfile::tempdir().unwrap();
            cli(&["gen-corpus", "--out", p(d.path())]);
            for f in ["train.txt", "valid.txt", "test.txt"] {
                ensure(d.path().join(f).is_file(), || format!("{f} missing"))?;
            }
            let lines = std::fs::read_to_string(d.path().join("train.txt")).unwrap().lines().count();
            ensure(lines == SynthSizes::default().train, || format!("{lines} training lines"))
        }),
        run("train --recipe maxpool echoes aggregation max and repeats bitwise", || {
            let root = tempfile::tempdir().unwrap();
            let data = root.path().join("data");
            let mut gen = vec!["gen-corpus", "--out", p(&data)];
            gen.extend(small_corpus_flags());
            cli(&gen);
            let mut csvs = Vec::new();
            for i in 0..2 {
                let out = root.path().join(format!("r{i}"));
                let code = cli(&[
                    "train", "--recipe", "maxpool", "--seed", "1", "--data", p(&data), "--out", p(&out),
                    "--max-epochs", "1", "--set", "final_k=2",
                ]);
                ensure(code == 0, || format!("exit {code}"))?;
                let summary: serde_json::Value = seqvae::experiment::read_json(&out.join("summary.json")).unwrap();
                ensure(summary["aggregation"] == "max", || format!("{}", summary["aggregation"]))?;
                let csv = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
                for col in ["epoch", "beta", "train_nll", "val_kl", "val_mi", "val_au", "val_cosine", "updates"] {
                    ensure(csv.lines().nth(1).unwrap().split(',').any(|c| c == col), || format!("no column {col}"))?;
                }
                csvs.push(csv);
            }
            ensure(csvs[0] == csvs[1], || "CSV differs between identical runs".into())
        }),
        run("train --recipe toy3d uses 3 hidden units and 3 latent dimensions", || {
            let Command::Train(a) = parse(&["train", "--recipe", "toy3d"]) else {
                return Err("not a train command".into());
            };
            let spec = seqvae::cli::resolve_spec(&a).unwrap();
            let m = spec.model_config(44);
            ensure((m.hidden_dim, m.latent_dim) == (3, 3), || format!("{m:?}"))
        }),
        run("unknown recipe exits 2", || {
            let code = cli(&["train", "--recipe", "nonesuch"]);
            ensure(code == 2, || format!("exit {code}"))
        }),
        run("evaluate --K 1 satisfies nll_iwae = -elbo_bound", || {
            let d = tempfile::tempdir().unwrap();
            let code = cli(&["evaluate", "--checkpoint", p(&untrained_fixture()), "--K", "1", "--out", p(d.path())]);
            ensure(code == 0, || format!("exit {code}"))?;
            let r: MetricsReport = seqvae::experiment::read_json(&d.path().join("eval_valid.json")).unwrap();
            close(r.nll_iwae, -r.elbo_bound, 1e-12, "identity")
        }),
        run("evaluate defaults to K = 500", || {
            let Command::Evaluate(a) = parse(&["evaluate", "--checkpoint", "x"]) else {
                return Err("not an evaluate command".into());
            };
            ensure(a.k == 500, || format!("K {}", a.k))
        }),
        run("untrained fixture evaluates to KL 0 and AU 0", || {
            let d = tempfile::tempdir().unwrap();
            cli(&["evaluate", "--checkpoint", p(&untrained_fixture()), "--K", "5", "--out", p(d.path())]);
            let r: MetricsReport = seqvae::experiment::read_json(&d.path().join("eval_valid.json")).unwrap();
            ensure(r.kl == 0.0 && r.active_units == 0, || format!("KL {} AU {}", r.kl, r.active_units))
        }),
        run("dual-kl-check on the collapsed fixture: gap about 0, exit 0, CSV header", || {
            let d = tempfile::tempdir().unwrap();
            let code = cli(&[
                "dual-kl-check", "--checkpoint", p(&untrained_fixture()), "--steps", "200", "--max-items", "20",
                "--samples-per-item", "1000", "--out", p(d.path()),
            ]);
            let s: seqvae::dualkl::GapSummary = seqvae::experiment::read_json(&d.path().join("dual_kl.json")).unwrap();
            ensure(code == i32::from(!s.passed), || format!("exit {code} with passed={}", s.passed))?;
            ensure(code == 0, || format!("exit {code}"))?;
            ensure(s.mean_gap.abs() <= 0.02 + 3.0 * s.gap_std_error, || format!("gap {}", s.mean_gap))?;
            let csv = std::fs::read_to_string(d.path().join("dual_kl.csv")).unwrap();
            let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
            ensure(header == "index,analytic_kl,dual_estimate,gap", || header.to_string())
        }),
        run("compare: one run gives one row; columns NLL, KL, MI, AU, cosine, updates", || {
            let root = tempfile::tempdir().unwrap();
            let codes = cli_session(root.path());
            ensure(codes[..2] == [0, 0] && codes[4] == 0, || format!("exit codes {codes:?}"))?;
            let csv = std::fs::read_to_string(root.path().join("compare.csv")).unwrap();
            let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
            ensure(lines.len() == 2, || format!("{} lines", lines.len()))?;
            ensure(lines[0] == "run,NLL,KL,MI,AU,cosine,updates", || lines[0].to_string())
        }),
        run("compare with a missing run directory exits 2 naming it", || {
            let missing = std::path::PathBuf::from("/nonexistent/run-dir");
            ensure(cli(&["compare", p(&missing)]) == 2, || "exit code".into())?;
            let err = seqvae::experiment::compare_rows(&[missing]).unwrap_err().to_string();
            ensure(err.contains("/nonexistent/run-dir"), || err)
        }),
    ]
}
