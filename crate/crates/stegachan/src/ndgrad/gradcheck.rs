//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker only ever calls `forward()`, so it stays independent of the
//! backward pass it verifies. The reported metric is the spec's
//! `max|g_ad - g_fd| / (max|g_fd| + 1e-8)` over the sampled entries.

use std::sync::Arc;

use super::exec::{Executor, ParamStore};
use super::graph::{Graph, NodeRef};
use super::tensor::Tensor;
use super::Scalar;
use crate::error::{Error, Result};

/// What to differentiate with respect to.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Param(&'a str),
    Input(&'a str),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max|g_ad - g_fd| / (max|g_fd| + 1e-8)` over the sampled entries.
    pub rel_err: f64,
    /// Flat index with the largest absolute deviation.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares reverse-mode gradients against central finite differences at the
/// given flat `indices` of `target`. `step` is the absolute perturbation.
pub fn check_gradient<F: Scalar>(
    graph: &Arc<Graph<F>>,
    params: &ParamStore<F>,
    inputs: &[(&str, Tensor<F>)],
    loss: NodeRef,
    target: Target<'_>,
    indices: &[usize],
    step: f64,
) -> Result<GradCheckReport> {
    if indices.is_empty() {
        return Err(Error::Config("gradient check needs at least one index".into()));
    }

    let mut exec = Executor::new(Arc::clone(graph));
    if let Target::Input(name) = target {
        exec.want_input_grads(&[name]);
    }
    for (name, t) in inputs {
        exec.set_input(name, t)?;
    }
    exec.forward(params)?;
    exec.backward(loss)?;

    let analytic_tensor = match target {
        Target::Param(name) => exec
            .param_grad(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter '{}'", name)))?,
        Target::Input(name) => exec
            .input_grad(name)
            .ok_or_else(|| Error::Config(format!("no gradient for input '{}'", name)))?,
    };
    let analytic: Vec<f64> = indices
        .iter()
        .map(|&i| analytic_tensor.data()[i].into_f64())
        .collect();

    // Finite differences: re-run forward twice per sampled entry.
    let h = F::from_f64(step);
    let mut numeric = Vec::with_capacity(indices.len());
    let mut params_fd = params.clone();
    let mut inputs_fd: Vec<(String, Tensor<F>)> = inputs
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();

    for &i in indices {
        let mut eval = |delta: F| -> Result<f64> {
            match target {
                Target::Param(name) => {
                    let p = params_fd
                        .get_mut(name)
                        .ok_or_else(|| Error::Config(format!("unknown parameter '{}'", name)))?;
                    let orig = p.data()[i];
                    p.data_mut()[i] = orig + delta;
                    for (n, t) in &inputs_fd {
                        exec.set_input(n, t)?;
                    }
                    exec.forward(&params_fd)?;
                    let v = exec.value(loss).data()[0].into_f64();
                    params_fd.get_mut(name).unwrap().data_mut()[i] = orig;
                    Ok(v)
                }
                Target::Input(name) => {
                    let t = inputs_fd
                        .iter_mut()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| t)
                        .ok_or_else(|| Error::Config(format!("unknown input '{}'", name)))?;
                    let orig = t.data()[i];
                    t.data_mut()[i] = orig + delta;
                    for (n, t) in &inputs_fd {
                        exec.set_input(n, t)?;
                    }
                    exec.forward(&params_fd)?;
                    let v = exec.value(loss).data()[0].into_f64();
                    inputs_fd
                        .iter_mut()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| t.data_mut()[i] = orig);
                    Ok(v)
                }
            }
        };
        let plus = eval(h)?;
        let minus = eval(-h)?;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let g_fd_max = numeric.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut worst = 0usize;
    let mut diff_max = 0.0f64;
    for (k, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let d = (a - n).abs();
        if d > diff_max {
            diff_max = d;
            worst = indices[k];
        }
    }
    Ok(GradCheckReport {
        rel_err: diff_max / (g_fd_max + 1e-8),
        worst_index: worst,
        analytic,
        numeric,
    })
}

/// Deterministically spreads `count` sample indices over a tensor of `numel`
/// elements (used to subsample large parameters during composed-graph checks).
pub fn spread_indices(numel: usize, count: usize) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    (0..count).map(|k| k * numel / count).collect()
}
