//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward values, so it is independent of every
//! backward closure it checks.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Numeric gradient of the scalar built by `f` with respect to every input.
pub fn numeric_gradient<F>(inputs: &[Tensor<f64>], step: f64, f: &F) -> Vec<Tensor<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for e in 0..inputs[t].numel() {
            let orig = inputs[t].data()[e];
            work[t].data_mut()[e] = orig + step;
            let plus = eval(&work);
            work[t].data_mut()[e] = orig - step;
            let minus = eval(&work);
            work[t].data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * step);
        }
        grads.push(grad);
    }
    grads
}

/// Analytic gradients of the scalar built by `f`; inputs without a path get
/// zeros.
pub fn analytic_gradient<F>(inputs: &[Tensor<f64>], f: &F) -> (f64, Vec<Tensor<f64>>)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let value = g.value(out).item();
    let grads = g.backward(out);
    let list = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    (value, list)
}

/// Compare analytic and numeric gradients for every input.
pub fn compare_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Vec<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let (_, analytic) = analytic_gradient(inputs, &f);
    let numeric = numeric_gradient(inputs, step, &f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff: f64 = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let an = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let max_abs = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let denom = an.max(nn);
            GradReport {
                rel_error: if denom > 0.0 { diff / denom } else { 0.0 },
                max_abs_error: max_abs,
                analytic_norm: an,
                numeric_norm: nn,
            }
        })
        .collect()
}

/// Panics unless every input's gradient agrees with finite differences to
/// relative error `tol`.
pub fn check_gradient<F>(inputs: &[Tensor<f64>], tol: f64, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    for (i, r) in compare_gradients(inputs, 1e-6, f).iter().enumerate() {
        assert!(
            r.rel_error <= tol,
            "input {i}: relative gradient error {:.3e} > {tol:.1e} ({r:?})",
            r.rel_error
        );
    }
}
