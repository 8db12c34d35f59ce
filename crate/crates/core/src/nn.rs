//! Parameter storage and the neural building blocks: embedding table, affine
//! layer, single-layer LSTM and a tanh MLP.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Half-width of the uniform weight initialisation.
pub const INIT_SCALE: f64 = 0.1;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding(self.tensors.iter().map(|t| g.leaf(t.detached())).collect())
    }

    /// Add the leaf gradients of a finished backward pass into the stores'
    /// gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, binding: &Binding) {
        for (t, &v) in self.tensors.iter_mut().zip(&binding.0) {
            if let Some(grad) = g.grad(v) {
                t.grad_mut().iter_mut().zip(grad).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Round every value through `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.add(format!("{name}.table"), uniform(rng, &[vocab_size, dim], INIT_SCALE));
        Self {
            table,
            vocab_size,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, ids: &[usize]) -> Result<Var> {
        g.gather(b.var(self.table), ids)
    }
}

/// `y = x·Wᵀ + b` with `W: [out×in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[output, input], INIT_SCALE));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let xw = g.matmul_nt(x, b.var(self.weight))?;
        g.add(xw, b.var(self.bias))
    }

    pub fn num_params(&self) -> usize {
        self.output * (self.input + 1)
    }
}

/// Single LSTM cell with fused gate weights in `[input, forget, cell, output]`
/// row-block order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), uniform(rng, &[4 * hidden, input], INIT_SCALE));
        let w_hh = store.add(format!("{name}.w_hh"), uniform(rng, &[4 * hidden, hidden], INIT_SCALE));
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|x| *x = FORGET_BIAS);
        let bias = store.add(format!("{name}.bias"), bias);
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    /// One recurrence step on `x: [B×input]`, `h, c: [B×hidden]`.
    pub fn step(&self, g: &mut Graph, b: &Binding, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let xi = g.matmul_nt(x, b.var(self.w_ih))?;
        let hh = g.matmul_nt(h, b.var(self.w_hh))?;
        let pre = g.add(xi, hh)?;
        let pre = g.add(pre, b.var(self.bias))?;
        let i = g.slice_cols(pre, 0, hd)?;
        let f = g.slice_cols(pre, hd, hd)?;
        let cand = g.slice_cols(pre, 2 * hd, hd)?;
        let o = g.slice_cols(pre, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Run the cell over per-step inputs `[B×input]` from `init`, returning
    /// every hidden state. States past a row's length are computed but must
    /// not be consumed downstream.
    pub fn run_sequence(
        &self,
        g: &mut Graph,
        b: &Binding,
        inputs: &[Var],
        lengths: &[usize],
        init: (Var, Var),
    ) -> Result<Vec<Var>> {
        if let Some(pos) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Contract(format!("run_sequence: row {pos} has length 0")));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > inputs.len()) {
            return Err(Error::Contract(format!(
                "run_sequence: length {l} exceeds {} steps",
                inputs.len()
            )));
        }
        let (mut h, mut c) = init;
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            (h, c) = self.step(g, b, x, h, c)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Affine layers with tanh between consecutive layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least input and output widths"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Affine::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, b, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}
