//! Central finite-difference checks against the analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Worst element found by a check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    fn observe(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = label();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        let checked = self.checked + other.checked;
        if other.max_rel_error > self.max_rel_error || self.checked == 0 {
            *self = other;
        }
        self.checked = checked;
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks d`f`/d`inputs` where `f` builds a scalar from leaf vars.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, floor: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            report.observe(|| format!("input {i}[{j}]"), analytic[j], (up - down) / (2.0 * eps), floor);
        }
    }
    Ok(report)
}

/// Checks every element of every parameter in `store` for the scalar
/// returned by `loss`.
pub fn check_params<F>(store: &mut ParamStore<f64>, eps: f64, floor: f64, loss: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    store.zero_grads();
    store.accumulate(&g, &grads);
    let ids: Vec<_> = store.ids().collect();
    let mut report = GradReport::default();
    for id in ids {
        let analytic = store.grad(id).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = x0 + eps;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[j] = x0 - eps;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[j] = x0;
            report.observe(|| format!("{}[{j}]", store.name(id)), a, (up - down) / (2.0 * eps), floor);
        }
    }
    Ok(report)
}
