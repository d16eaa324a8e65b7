//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward values on fresh tapes built
//! from perturbed inputs, so it shares nothing with the backward code it
//! checks.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-6, step: 1e-5 }
    }
}

impl Tolerance {
    /// `|a - n| <= max(rel * max(|a|, |n|), abs)`
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err <= (self.rel * analytic.abs().max(numeric.abs())).max(self.abs)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, what: String, analytic: f64, numeric: f64, tol: &Tolerance) {
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if !tol.accepts(analytic, numeric) || !analytic.is_finite() {
            self.failures.push(format!("{what}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.failures.extend(other.failures);
    }
}

/// Checks d f / d inputs for every coordinate of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, tol: Tolerance) -> Result<FdReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|v| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.numel()])).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = FdReport::default();
    let mut work = inputs.to_vec();
    for (ti, (t, grad)) in inputs.iter().zip(&analytic).enumerate() {
        for (j, (&x0, &g)) in t.data().iter().zip(grad).enumerate() {
            work[ti].data_mut()[j] = x0 + tol.step;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = x0 - tol.step;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * tol.step);
            report.record(format!("input {ti}[{j}]"), g, numeric, &tol);
        }
    }
    Ok(report)
}

/// Checks d f / d parameters at the listed coordinates, plus a directional
/// derivative along `direction` (one entry per scalar of every parameter,
/// in store order, rescaled to unit length) when given.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    direction: Option<&[f64]>,
    f: F,
    tol: Tolerance,
) -> Result<FdReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &'t ParamStore<f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::tracking_frozen();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic = |id: ParamId, j: usize| grads.param(id).map_or(0.0, |g| g[j]);

    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let tape = Tape::new();
        Ok(f(&tape, s)?.item())
    };

    let mut report = FdReport::default();
    let mut work = store.clone();
    for &(id, j) in coords {
        let x0 = store.get(id).tensor.data()[j];
        work.get_mut(id).tensor.data_mut()[j] = x0 + tol.step;
        let up = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[j] = x0 - tol.step;
        let down = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[j] = x0;
        let numeric = (up - down) / (2.0 * tol.step);
        report.record(format!("{}[{j}]", store.get(id).name), analytic(id, j), numeric, &tol);
    }

    if let Some(dir) = direction {
        let n = store.num_scalars();
        if dir.len() != n {
            return Err(TensorError::Contract(format!("direction has {} entries, model has {n}", dir.len())));
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(TensorError::Contract("direction must be nonzero and finite".into()));
        }
        let mut dot = 0.0;
        let mut up = store.clone();
        let mut down = store.clone();
        let mut offset = 0;
        for (id, p) in store.iter() {
            let len = p.tensor.numel();
            let g = grads.param(id);
            for j in 0..len {
                let d = dir[offset + j] / norm;
                dot += d * g.map_or(0.0, |g| g[j]);
                up.get_mut(id).tensor.data_mut()[j] += tol.step * d;
                down.get_mut(id).tensor.data_mut()[j] -= tol.step * d;
            }
            offset += len;
        }
        let numeric = (eval(&up)? - eval(&down)?) / (2.0 * tol.step);
        report.record("directional".into(), dot, numeric, &tol);
    }
    Ok(report)
}
