//! The sequence VAE: LSTM encoder, temporal aggregation, diagonal Gaussian
//! posterior head and an autoregressive LSTM decoder conditioned on `z`.

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, AggregationMethod};
use crate::data::{Batch, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{Affine, Binding, Embedding, LstmCell, ParamId, ParamStore};
use crate::rng::{self, streams, Rng};
use crate::tensor::{Graph, Tensor, Var};

/// Added to feature norms in the cosine penalty.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub aggregation: AggregationMethod,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS || self.embed_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::config(format!("degenerate model dimensions: {self:?}")));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let (v, e, h, d) = (self.vocab_size, self.embed_dim, self.hidden_dim, self.latent_dim);
        let embeddings = 2 * v * e;
        let encoder = 4 * h * (e + h + 1);
        let heads = 2 * d * (h + 1);
        let init = 2 * h * (d + 1);
        let decoder = 4 * h * (e + d + h + 1);
        let output = v * (h + 1);
        embeddings + encoder + heads + init + decoder + output
    }
}

/// `q(z|x) = N(mu, exp(log_var))`, both `[B×D]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Nats per sequence, batch mean.
    pub reconstruction_nll: f64,
    pub kl: f64,
    pub cosine_penalty: f64,
    pub beta: f64,
    pub lambda_cos: f64,
    pub total: f64,
}

/// Graph handles of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub features: Var,
    pub posterior: GaussianPosterior,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub enc_embedding: Embedding,
    pub encoder: LstmCell,
    pub mu_head: Affine,
    pub logvar_head: Affine,
    pub dec_embedding: Embedding,
    pub latent_to_state: Affine,
    pub decoder: LstmCell,
    pub output_head: Affine,
}

/// Posterior parameters and features as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedValues {
    pub features: Tensor,
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl VaeModel {
    /// Fresh model with weights drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, streams::INIT);
        let (v, e, h, d) = (config.vocab_size, config.embed_dim, config.hidden_dim, config.latent_dim);
        let mut p = ParamStore::new();
        let enc_embedding = Embedding::new(&mut p, "enc_embedding", v, e, &mut rng);
        let encoder = LstmCell::new(&mut p, "encoder", e, h, &mut rng);
        let mu_head = Affine::new(&mut p, "mu_head", h, d, &mut rng);
        let logvar_head = Affine::new(&mut p, "logvar_head", h, d, &mut rng);
        let dec_embedding = Embedding::new(&mut p, "dec_embedding", v, e, &mut rng);
        let latent_to_state = Affine::new(&mut p, "latent_to_state", d, 2 * h, &mut rng);
        let decoder = LstmCell::new(&mut p, "decoder", e + d, h, &mut rng);
        let output_head = Affine::new(&mut p, "output_head", h, v, &mut rng);
        Ok(Self {
            config,
            params: p,
            enc_embedding,
            encoder,
            mu_head,
            logvar_head,
            dec_embedding,
            latent_to_state,
            decoder,
            output_head,
        })
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        vec![
            self.enc_embedding.table,
            self.encoder.w_ih,
            self.encoder.w_hh,
            self.encoder.bias,
            self.mu_head.weight,
            self.mu_head.bias,
            self.logvar_head.weight,
            self.logvar_head.bias,
        ]
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        vec![
            self.dec_embedding.table,
            self.latent_to_state.weight,
            self.latent_to_state.bias,
            self.decoder.w_ih,
            self.decoder.w_hh,
            self.decoder.bias,
            self.output_head.weight,
            self.output_head.bias,
        ]
    }

    /// Zero both posterior heads, making `q(z|x) = N(0, I)` for every input.
    pub fn zero_posterior_heads(&mut self) {
        for id in [
            self.mu_head.weight,
            self.mu_head.bias,
            self.logvar_head.weight,
            self.logvar_head.bias,
        ] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Encoder hidden states, one `[B×H]` per time step.
    pub fn encoder_states(&self, g: &mut Graph, b: &Binding, batch: &Batch) -> Result<Vec<Var>> {
        let n = batch.size();
        let h = self.config.hidden_dim;
        let inputs = (0..batch.max_len)
            .map(|t| self.enc_embedding.forward(g, b, &batch.step(t)))
            .collect::<Result<Vec<_>>>()?;
        let h0 = g.constant(Tensor::zeros(vec![n, h]));
        let c0 = g.constant(Tensor::zeros(vec![n, h]));
        self.encoder.run_sequence(g, b, &inputs, &batch.lengths, (h0, c0))
    }

    /// Feature `h_x: [B×H]` and posterior parameters. `log_var` is the raw
    /// head output; the variance is `exp(log_var)`.
    pub fn encode(&self, g: &mut Graph, b: &Binding, batch: &Batch) -> Result<(Var, GaussianPosterior)> {
        let states = self.encoder_states(g, b, batch)?;
        let hidden = g.stack_time(&states)?;
        let features = aggregate(g, hidden, &batch.lengths, self.config.aggregation)?;
        let mu = self.mu_head.forward(g, b, features)?;
        let log_var = self.logvar_head.forward(g, b, features)?;
        Ok((features, GaussianPosterior { mu, log_var }))
    }

    /// Per-row negative log-likelihood in nats of the targets (tokens then
    /// EOS), teacher forced.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        b: &Binding,
        z: Var,
        batch: &Batch,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Var> {
        let n = batch.size();
        let (h, d) = (self.config.hidden_dim, self.config.latent_dim);
        if g.shape(z) != [n, d] {
            return Err(Error::Shape {
                op: "decode",
                lhs: g.shape(z).to_vec(),
                rhs: vec![n, d],
            });
        }
        let dec_input = batch.dropped_dec_input(dropout_rate, rng)?;
        let td = batch.dec_len();

        let init = self.latent_to_state.forward(g, b, z)?;
        let h0 = g.slice_cols(init, 0, h)?;
        let h0 = g.tanh(h0);
        let c0 = g.slice_cols(init, h, h)?;

        let mut inputs = Vec::with_capacity(td);
        for t in 0..td {
            let ids: Vec<usize> = (0..n).map(|i| dec_input[i * td + t]).collect();
            let e = self.dec_embedding.forward(g, b, &ids)?;
            inputs.push(g.concat_cols(&[e, z])?);
        }
        let dec_lengths: Vec<usize> = batch.lengths.iter().map(|&l| l + 1).collect();
        let states = self.decoder.run_sequence(g, b, &inputs, &dec_lengths, (h0, c0))?;

        let stacked = g.stack_time(&states)?;
        let flat = g.reshape(stacked, vec![n * td, h])?;
        let logits = self.output_head.forward(g, b, flat)?;
        let lse = g.logsumexp_axis(logits, 1)?;
        let picked = g.pick(logits, &batch.dec_target)?;
        let token_nll = g.sub(lse, picked)?;
        let mask: Vec<f64> = batch.dec_mask().into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect();
        let mask = g.constant(Tensor::vector(mask));
        let token_nll = g.mul(token_nll, mask)?;
        let per_row = g.reshape(token_nll, vec![n, td])?;
        g.sum_axis(per_row, 1)
    }

    /// Negative ELBO-style training objective
    /// `mean(rec) + beta·mean(KL) + lambda_cos·cosine_penalty` with one
    /// posterior sample per row drawn from `noise`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_noise(
        &self,
        g: &mut Graph,
        b: &Binding,
        batch: &Batch,
        beta: f64,
        lambda_cos: f64,
        dropout_rate: f64,
        noise: &Tensor,
        rng: &mut Rng,
    ) -> Result<LossOutput> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Contract(format!("beta {beta} outside [0, 1]")));
        }
        if !(lambda_cos >= 0.0) {
            return Err(Error::Contract(format!("lambda_cos {lambda_cos} must be non-negative")));
        }
        let (features, posterior) = self.encode(g, b, batch)?;
        let z = reparameterize(g, posterior, noise)?;
        let rec = self.decode_teacher_forced(g, b, z, batch, dropout_rate, rng)?;
        let rec = g.mean(rec)?;
        let kl = analytic_kl(g, posterior)?;
        let kl = g.mean(kl)?;
        let cos = cosine_penalty(g, features)?;

        let weighted_kl = g.scale(kl, beta);
        let total = g.add(rec, weighted_kl)?;
        let weighted_cos = g.scale(cos, lambda_cos);
        let total = g.add(total, weighted_cos)?;
        let breakdown = LossBreakdown {
            reconstruction_nll: g.item(rec),
            kl: g.item(kl),
            cosine_penalty: g.item(cos),
            beta,
            lambda_cos,
            total: g.item(total),
        };
        Ok(LossOutput {
            total,
            features,
            posterior,
            breakdown,
        })
    }

    /// [`VaeModel::loss_with_noise`] with the posterior noise drawn from `rng`
    /// (before any word-dropout draws).
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        b: &Binding,
        batch: &Batch,
        beta: f64,
        lambda_cos: f64,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<LossOutput> {
        let d = self.config.latent_dim;
        let noise = Tensor::new(vec![batch.size(), d], rng::standard_normal(rng, batch.size() * d))?;
        self.loss_with_noise(g, b, batch, beta, lambda_cos, dropout_rate, &noise, rng)
    }

    /// Features and posterior parameters without recording gradients.
    pub fn encode_values(&self, batch: &Batch) -> Result<EncodedValues> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g);
        let (features, post) = self.encode(&mut g, &b, batch)?;
        Ok(EncodedValues {
            features: g.value(features).clone(),
            mu: g.value(post.mu).clone(),
            log_var: g.value(post.log_var).clone(),
        })
    }

    /// `log p(x_i | z_i)` per row, no dropout, no gradients.
    pub fn log_likelihood(&self, batch: &Batch, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g);
        let z = g.constant(z.detached());
        let mut unused = rng::stream(0, 0);
        let nll = self.decode_teacher_forced(&mut g, &b, z, batch, 0.0, &mut unused)?;
        Ok(g.value(nll).data().iter().map(|x| -x).collect())
    }

    /// Greedy decoding from a latent code, for smoke tests.
    pub fn greedy_sample(&self, z: &[f64], max_len: usize) -> Result<Vec<usize>> {
        let (h, d) = (self.config.hidden_dim, self.config.latent_dim);
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g);
        let z = g.constant(Tensor::new(vec![1, d], z.to_vec())?);
        let init = self.latent_to_state.forward(&mut g, &b, z)?;
        let h0 = g.slice_cols(init, 0, h)?;
        let mut hs = g.tanh(h0);
        let mut cs = g.slice_cols(init, h, h)?;
        let mut token = BOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let e = self.dec_embedding.forward(&mut g, &b, &[token])?;
            let x = g.concat_cols(&[e, z])?;
            (hs, cs) = self.decoder.step(&mut g, &b, x, hs, cs)?;
            let logits = self.output_head.forward(&mut g, &b, hs)?;
            let row = g.value(logits).data();
            token = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if token == EOS {
                break;
            }
            out.push(token);
        }
        Ok(out)
    }

    /// Copy with every parameter rounded to checkpoint precision.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        m.params.quantize_f32();
        m
    }
}

/// `z = mu + exp(log_var / 2) ⊙ noise`.
pub fn reparameterize(g: &mut Graph, posterior: GaussianPosterior, noise: &Tensor) -> Result<Var> {
    let eps = g.constant(noise.detached());
    let half = g.scale(posterior.log_var, 0.5);
    let std = g.exp(half);
    let spread = g.mul(std, eps)?;
    g.add(posterior.mu, spread)
}

/// Per-row `KL(q || N(0, I)) = ½ Σ_d (mu² + σ² − 1 − log σ²)`, shape `[B]`.
pub fn analytic_kl(g: &mut Graph, posterior: GaussianPosterior) -> Result<Var> {
    let mu2 = g.square(posterior.mu);
    let var = g.exp(posterior.log_var);
    let s = g.add(mu2, var)?;
    let s = g.sub(s, posterior.log_var)?;
    let s = g.add_scalar(s, -1.0);
    let s = g.sum_axis(s, 1)?;
    Ok(g.scale(s, 0.5))
}

/// Plain-value KL of one diagonal Gaussian from the standard normal.
pub fn gaussian_kl(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Mean pairwise cosine similarity between the rows of `features: [B×H]`
/// over all pairs `i < j`. Fewer than two rows gives 0.
pub fn cosine_penalty(g: &mut Graph, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "cosine_penalty",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[0];
    if n < 2 {
        log::warn!("cosine penalty needs at least two rows, got {n}; using 0");
        return Ok(g.scalar(0.0));
    }
    let sq = g.square(features);
    let sq = g.sum_axis(sq, 1)?;
    let norms = g.sqrt(sq)?;
    let norms = g.add_scalar(norms, COSINE_EPS);
    let ones = g.constant(Tensor::full(vec![n], 1.0));
    let inv = g.div(ones, norms)?;
    let unit = g.scale_rows(features, inv)?;
    let sims = g.matmul_nt(unit, unit)?;
    let pairs = n * (n - 1) / 2;
    let mut upper = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            upper[i * n + j] = 1.0 / pairs as f64;
        }
    }
    let upper = g.constant(Tensor::new(vec![n, n], upper)?);
    let weighted = g.mul(sims, upper)?;
    Ok(g.sum(weighted))
}

/// Plain-value mean pairwise cosine, same definition as [`cosine_penalty`].
pub fn mean_pairwise_cosine(rows: &[&[f64]]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() + COSINE_EPS)
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            total += dot / (norms[i] * norms[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}
