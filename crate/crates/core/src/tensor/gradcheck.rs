//! Central finite differences used as an independent oracle for the
//! recorded reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, element)` where the relative error peaked.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the graph gradient of a scalar function against central
/// differences, for every element of every input.
///
/// `build` records the function on a fresh graph given one leaf per input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = build(&mut graph, &leaves)?;
    graph.backward(out)?;

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("build succeeded once already");
        g.value(out).item().expect("scalar output")
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = graph
            .grad(leaves[idx])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = finite_diff_grad(
            |x| {
                let mut values = inputs.to_vec();
                values[idx] = x.clone();
                eval(&values)
            },
            input,
            eps,
        );
        for (j, (&a, &n)) in analytic.iter().zip(numeric.data()).enumerate() {
            let rel = relative_error(a, n);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (idx, j);
            }
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
