//! Finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is used to verify.

use super::{DiffTensor, Graph, Tensor};
use crate::error::Result;

/// Gradients whose magnitude falls below this are compared on an absolute
/// scale of this size, so that round-off in near-zero entries does not
/// dominate the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Central difference `(f(x+h) − f(x−h)) / 2h` for every element of `x`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, RELATIVE_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Builds `build` once to take analytic gradients with respect to every
/// input, then compares each against central differences with step `h`.
/// Returns the worst relative error over all inputs.
pub fn check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[DiffTensor<'g>]) -> Result<DiffTensor<'g>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.parameter(t.clone())).collect();
    let out = build(&graph, &vars)?;
    graph.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut failure = None;
        let numeric = numeric_gradient(
            |probe| {
                let g = Graph::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.parameter(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                match build(&g, &vars).and_then(|o| o.item()) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic[k], &numeric));
    }
    Ok(worst)
}
