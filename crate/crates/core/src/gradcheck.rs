//! Central finite-difference checks of analytic gradients (f64).

use std::fmt;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub abs_floor: f64,
    /// Entries probed per tensor; larger tensors are sampled on a fixed stride.
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn new(name: &str, tolerance: f64) -> Self {
        GradCheckReport {
            name: name.to_owned(),
            checked: 0,
            max_rel_error: 0.0,
            tolerance,
            worst: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if rel > self.max_rel_error || !rel.is_finite() {
            self.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            self.worst = Some(Mismatch {
                tensor: tensor.to_owned(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>5} entries  max rel err {:.3e}  (tol {:.0e})  {}",
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn probe_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let stride = numel as f64 / max as f64;
    (0..max).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
}

/// Checks gradients with respect to free leaf tensors on an empty store in
/// training mode.
pub fn check_leaves<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    check_leaves_in(&store, true, inputs, f, cfg)
}

pub fn check_leaves_in<F>(
    store: &ParamStore<f64>,
    training: bool,
    inputs: &[Tensor<f64>],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, training);
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new(store, training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::new("leaves", cfg.tolerance);
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for idx in probe_indices(inputs[k].numel(), cfg.max_entries) {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + cfg.step;
            let up = eval(&work)?;
            work[k].data_mut()[idx] = orig - cfg.step;
            let down = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            report.record(&format!("input{k}"), idx, analytic.data()[idx], numeric, cfg.abs_floor);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to stored parameters. `params` selects which
/// parameters to probe (all when empty).
pub fn check_params<F>(
    name: &str,
    store: &ParamStore<f64>,
    training: bool,
    params: &[ParamId],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store, training);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    drop(g);

    let ids: Vec<ParamId> = if params.is_empty() {
        store.param_ids().collect()
    } else {
        params.to_vec()
    };
    let mut report = GradCheckReport::new(name, cfg.tolerance);
    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s, training);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    for id in ids {
        let pname = store.param(id).name.clone();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for idx in probe_indices(store.value(id).numel(), cfg.max_entries) {
            let orig = store.value(id).data()[idx];
            work.param_mut(id).value.data_mut()[idx] = orig + cfg.step;
            let up = eval(&work)?;
            work.param_mut(id).value.data_mut()[idx] = orig - cfg.step;
            let down = eval(&work)?;
            work.param_mut(id).value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            report.record(&pname, idx, analytic.data()[idx], numeric, cfg.abs_floor);
        }
    }
    Ok(report)
}
