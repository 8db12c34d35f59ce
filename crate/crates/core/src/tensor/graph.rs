use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    ClampMax(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    /// Selected index along the reduced axis, one per output element.
    SelectAxis(Var, usize, Vec<usize>),
    LogSumExpAxis(Var, usize),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    StackTime(Vec<Var>),
    TakeTime(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Where(Var, Vec<bool>),
    ScaleRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only tape of operations.
///
/// Inputs of a node always precede it, so the append order is a topological
/// order and [`Graph::backward`] simply walks the tape in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, n, inner)` decomposition of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 && na >= 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

impl Graph {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that only evaluates values. Forward results are identical to
    /// a recording graph; [`Graph::backward`] on it is a contract error.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node appended after the first `len`. Handles past `len`
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_raw(value.detached(), Op::Leaf, requires_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value.detached(), Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        let value = Tensor {
            shape,
            data,
            grad: None,
        };
        self.push_raw(value, op, requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- elementwise -----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let (na, nb) = (da.len(), db.len());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        Ok(self.push(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).iter().any(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(shape, data, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `min(x, ceiling)`; no gradient flows through clamped entries.
    pub fn clamp_max(&mut self, a: Var, ceiling: f64) -> Var {
        self.unary(a, |x| x.min(ceiling), Op::ClampMax(a, ceiling))
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(self.data(a), self.data(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        mm_nt(self.data(a), self.data(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        if d.is_empty() {
            return Err(Error::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = d.iter().sum::<f64>() / d.len() as f64;
        Ok(self.push(Vec::new(), vec![m], Op::MeanAll(a), &[a]))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] == 0 {
            return Err(Error::Domain {
                op,
                detail: format!("empty axis {axis} in shape {shape:?}"),
            });
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((outer, n, inner, out_shape))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.check_axis("sum_axis", a, axis)?;
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += x;
                }
            }
        }
        Ok(self.push(shape, out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.check_axis("mean_axis", a, axis)?;
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * n + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= n as f64);
        Ok(self.push(shape, out, Op::MeanAxis(a, axis), &[a]))
    }

    fn select_axis(&mut self, name: &'static str, a: Var, axis: usize, key: impl Fn(f64) -> f64) -> Result<Var> {
        let (outer, n, inner, shape) = self.check_axis(name, a, axis)?;
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_key = key(d[o * n * inner + i]);
                for k in 1..n {
                    let kk = key(d[(o * n + k) * inner + i]);
                    // strict comparison: the earliest index wins ties
                    if kk > best_key {
                        best = k;
                        best_key = kk;
                    }
                }
                arg[o * inner + i] = best;
                out[o * inner + i] = d[(o * n + best) * inner + i];
            }
        }
        Ok(self.push(shape, out, Op::SelectAxis(a, axis, arg), &[a]))
    }

    /// Maximum along `axis`; the gradient goes to the earliest maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.select_axis("max_axis", a, axis, |x| x)
    }

    /// Entry of largest magnitude along `axis`, sign preserved; earliest wins ties.
    pub fn abs_max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.select_axis("abs_max_axis", a, axis, f64::abs)
    }

    /// Overflow-safe `log Σ exp` along `axis`.
    pub fn logsumexp_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.check_axis("logsumexp_axis", a, axis)?;
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * n + k) * inner + i];
                out[o * inner + i] = log_sum_exp_iter((0..n).map(at));
            }
        }
        Ok(self.push(shape, out, Op::LogSumExpAxis(a, axis), &[a]))
    }

    // ----- structural -----

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a), &[a]))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s.to_vec(),
                rhs: vec![start, len],
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols(a, start), &[a]))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stack `T` tensors of shape `[B×H]` into `[B×T×H]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let Some(&first) = steps.first() else {
            return Err(Error::contract("stack_time: no steps"));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 {
            return Err(Error::Shape {
                op: "stack_time",
                lhs: s0,
                rhs: vec![],
            });
        }
        let (b, h, t) = (s0[0], s0[1], steps.len());
        if let Some(bad) = steps.iter().find(|&&v| self.shape(v) != s0.as_slice()) {
            return Err(Error::Shape {
                op: "stack_time",
                lhs: s0,
                rhs: self.shape(*bad).to_vec(),
            });
        }
        let mut out = vec![0.0; b * t * h];
        for (ti, &v) in steps.iter().enumerate() {
            let d = self.data(v);
            for bi in 0..b {
                out[(bi * t + ti) * h..(bi * t + ti + 1) * h].copy_from_slice(&d[bi * h..(bi + 1) * h]);
            }
        }
        Ok(self.push(vec![b, t, h], out, Op::StackTime(steps.to_vec()), steps))
    }

    /// `out[b] = a[b, index[b], :]` for `a: [B×T×H]`.
    pub fn take_time(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || index.len() != s[0] || index.iter().any(|&t| t >= s[1]) {
            return Err(Error::Shape {
                op: "take_time",
                lhs: s,
                rhs: index.to_vec(),
            });
        }
        let (b, t, h) = (s[0], s[1], s[2]);
        let d = self.data(a);
        let mut out = Vec::with_capacity(b * h);
        for (bi, &ti) in index.iter().enumerate() {
            out.extend_from_slice(&d[(bi * t + ti) * h..(bi * t + ti + 1) * h]);
        }
        Ok(self.push(vec![b, h], out, Op::TakeTime(a, index.to_vec()), &[a]))
    }

    /// `out[i] = a[i, index[i]]` for `a: [N×V]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || index.len() != s[0] || index.iter().any(|&j| j >= s[1]) {
            return Err(Error::Shape {
                op: "pick",
                lhs: s,
                rhs: vec![index.len()],
            });
        }
        let d = self.data(a);
        let out = index.iter().enumerate().map(|(i, &j)| d[i * s[1] + j]).collect();
        Ok(self.push(vec![s[0]], out, Op::Pick(a, index.to_vec()), &[a]))
    }

    /// Rows of `table: [V×E]` selected by `ids`, giving `[N×E]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: s,
                rhs: vec![],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= s[0]) {
            return Err(Error::Contract(format!("gather: id {bad} >= table rows {}", s[0])));
        }
        let e = s[1];
        let d = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&d[id * e..(id + 1) * e]);
        }
        Ok(self.push(vec![ids.len(), e], out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Keep entries where `mask` is true, replace the rest with `fill`.
    pub fn where_mask(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.data(a).len() {
            return Err(Error::Shape {
                op: "where_mask",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let shape = self.shape(a).to_vec();
        let out = self
            .data(a)
            .iter()
            .zip(mask)
            .map(|(&x, &keep)| if keep { x } else { fill })
            .collect();
        Ok(self.push(shape, out, Op::Where(a, mask.to_vec()), &[a]))
    }

    /// Multiply row `i` of `a: [N×M]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a).to_vec(), self.shape(s).to_vec());
        if sa.len() != 2 || ss != [sa[0]] {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: sa,
                rhs: ss,
            });
        }
        let m = sa[1];
        let (da, ds) = (self.data(a), self.data(s));
        let out = da.iter().enumerate().map(|(i, &x)| x * ds[i / m]).collect();
        Ok(self.push(sa, out, Op::ScaleRows(a, s), &[a, s]))
    }

    // ----- backward -----

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::contract("backward on an inference graph"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                match self.nodes[idx].grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => self.nodes[idx].grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.wants(v) {
                let n = self.data(v).len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let na = self.data(a).len();
                let nb = self.data(b).len();
                acc(a, &mut |ga| g.iter().enumerate().for_each(|(i, &gi)| ga[i % na] += gi));
                acc(b, &mut |gb| g.iter().enumerate().for_each(|(i, &gi)| gb[i % nb] += sign * gi));
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let (na, nb) = (da.len(), db.len());
                acc(a, &mut |ga| {
                    g.iter().enumerate().for_each(|(i, &gi)| ga[i % na] += gi * db[i % nb])
                });
                acc(b, &mut |gb| {
                    g.iter().enumerate().for_each(|(i, &gi)| gb[i % nb] += gi * da[i % na])
                });
            }
            &Op::Div(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let (na, nb) = (da.len(), db.len());
                acc(a, &mut |ga| {
                    g.iter().enumerate().for_each(|(i, &gi)| ga[i % na] += gi / db[i % nb])
                });
                acc(b, &mut |gb| {
                    g.iter().enumerate().for_each(|(i, &gi)| {
                        let yb = db[i % nb];
                        gb[i % nb] -= gi * da[i % na] / (yb * yb)
                    })
                });
            }
            &Op::Neg(a) => acc(a, &mut |ga| zip_add(ga, g, |gi, _| -gi, y)),
            &Op::Scale(a, c) => acc(a, &mut |ga| zip_add(ga, g, |gi, _| c * gi, y)),
            &Op::AddScalar(a) => acc(a, &mut |ga| zip_add(ga, g, |gi, _| gi, y)),
            &Op::Tanh(a) => acc(a, &mut |ga| zip_add(ga, g, |gi, yi| gi * (1.0 - yi * yi), y)),
            &Op::Sigmoid(a) => acc(a, &mut |ga| zip_add(ga, g, |gi, yi| gi * yi * (1.0 - yi), y)),
            &Op::Exp(a) => acc(a, &mut |ga| zip_add(ga, g, |gi, yi| gi * yi, y)),
            &Op::Log(a) => {
                let x = self.data(a);
                acc(a, &mut |ga| zip_add(ga, g, |gi, xi| gi / xi, x))
            }
            // zero-valued outputs get a zero subgradient
            &Op::Sqrt(a) => acc(a, &mut |ga| {
                zip_add(ga, g, |gi, yi| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 }, y)
            }),
            &Op::Square(a) => {
                let x = self.data(a);
                acc(a, &mut |ga| zip_add(ga, g, |gi, xi| 2.0 * xi * gi, x))
            }
            &Op::ClampMax(a, c) => {
                let x = self.data(a);
                acc(a, &mut |ga| zip_add(ga, g, |gi, xi| if xi < c { gi } else { 0.0 }, x))
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(a), self.data(b));
                acc(a, &mut |ga| mm_nt(g, db, m, n, k, ga));
                acc(b, &mut |gb| mm_tn(da, g, m, k, n, gb));
            }
            &Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (da, db) = (self.data(a), self.data(b));
                acc(a, &mut |ga| mm(g, db, m, n, k, ga));
                acc(b, &mut |gb| mm_tn(g, da, m, n, k, gb));
            }
            &Op::Transpose(a) => {
                let s = self.shape(a);
                let (m, n) = (s[0], s[1]);
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            &Op::SumAll(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::MeanAll(a) => {
                let n = self.data(a).len() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            &Op::SumAxis(a, axis) | &Op::MeanAxis(a, axis) => {
                let (outer, n, inner) = axis_split(self.shape(a), axis);
                let w = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                ga[(o * n + k) * inner + i] += w * g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::SelectAxis(a, axis, arg) => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = arg[o * inner + i];
                            ga[(o * n + k) * inner + i] += g[o * inner + i];
                        }
                    }
                })
            }
            &Op::LogSumExpAxis(a, axis) => {
                let (outer, n, inner) = axis_split(self.shape(a), axis);
                let x = self.data(a);
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let yo = y[o * inner + i];
                            if !yo.is_finite() {
                                continue;
                            }
                            for k in 0..n {
                                let j = (o * n + k) * inner + i;
                                ga[j] += g[o * inner + i] * (x[j] - yo).exp();
                            }
                        }
                    }
                })
            }
            &Op::Reshape(a) => acc(a, &mut |ga| zip_add(ga, g, |gi, _| gi, y)),
            &Op::SliceCols(a, start) => {
                let n = self.shape(a)[1];
                let (m, len) = (node.value.shape()[0], node.value.shape()[1]);
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += g[i * len + j];
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &mut |gp| {
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackTime(steps) => {
                let s = node.value.shape();
                let (b, t, h) = (s[0], s[1], s[2]);
                for (ti, &v) in steps.iter().enumerate() {
                    acc(v, &mut |gv| {
                        for bi in 0..b {
                            let src = &g[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                            for (d, &x) in gv[bi * h..(bi + 1) * h].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    });
                }
            }
            Op::TakeTime(a, index) => {
                let s = self.shape(*a);
                let (t, h) = (s[1], s[2]);
                acc(*a, &mut |ga| {
                    for (bi, &ti) in index.iter().enumerate() {
                        for j in 0..h {
                            ga[(bi * t + ti) * h + j] += g[bi * h + j];
                        }
                    }
                })
            }
            Op::Pick(a, index) => {
                let v = self.shape(*a)[1];
                acc(*a, &mut |ga| {
                    for (i, &j) in index.iter().enumerate() {
                        ga[i * v + j] += g[i];
                    }
                })
            }
            Op::Gather(table, ids) => {
                let e = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            gt[id * e + j] += g[r * e + j];
                        }
                    }
                })
            }
            Op::Where(a, mask) => acc(*a, &mut |ga| {
                for ((d, &gi), &keep) in ga.iter_mut().zip(g).zip(mask) {
                    if keep {
                        *d += gi;
                    }
                }
            }),
            &Op::ScaleRows(a, s) => {
                let m = self.shape(a)[1];
                let (da, ds) = (self.data(a), self.data(s));
                acc(a, &mut |ga| {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i] * ds[i / m];
                    }
                });
                acc(s, &mut |gs| {
                    for (i, &gi) in g.iter().enumerate() {
                        gs[i / m] += gi * da[i];
                    }
                });
            }
        }
    }
}

fn zip_add(dst: &mut [f64], g: &[f64], f: impl Fn(f64, f64) -> f64, aux: &[f64]) {
    for ((d, &gi), &ai) in dst.iter_mut().zip(g).zip(aux) {
        *d += f(gi, ai);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `log Σ exp` of a sequence of values.
pub fn log_sum_exp_iter(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}
