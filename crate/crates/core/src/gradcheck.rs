//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::nn::{Binding, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Step used by the checks in this crate.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (near) zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// (input index or parameter name, flat coordinate, analytic, numeric)
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    fn record(&mut self, name: impl FnOnce() -> String, i: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name(), i, analytic, numeric));
        }
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Check `f` (a scalar function of the `inputs`) at every input coordinate.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            report.record(|| format!("input {k}"), i, analytic[k][i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Check a loss built from every parameter of `store` at every coordinate.
pub fn check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Binding) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let out = f(&mut g, &b)?;
    g.backward(out)?;
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(b.var(id)).map_or_else(|| vec![0.0; store.get(id).numel()], <[f64]>::to_vec))
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let b = s.bind(&mut g);
        let out = f(&mut g, &b)?;
        Ok(g.item(out))
    };
    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = store.clone();
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).numel() {
            let x = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x;
            report.record(|| store.name(id).to_string(), i, analytic[k][i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}
