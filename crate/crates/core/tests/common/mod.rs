#![allow(dead_code)]

use hyperedit_core::autograd::{Graph, Var};
use hyperedit_core::Tensor;

/// Central finite-difference derivative of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &Tensor, i: usize, h: f64, f: &mut dyn FnMut(&Tensor) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / scale
}

/// Checks d(build(inputs))/d(inputs) against finite differences for every coordinate.
pub fn check_all(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut f = |t: &Tensor| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| g.leaf(if j == k { t.clone() } else { u.clone() }))
                    .collect();
                let out = build(&mut g, &vars);
                g.value(out).item()
            };
            let numeric = central_diff(input, i, 1e-6, &mut f);
            let a = analytic.data()[i];
            assert!(
                rel_err(a, numeric) <= tol,
                "input {k} coord {i}: analytic {a}, numeric {numeric}"
            );
        }
    }
}
