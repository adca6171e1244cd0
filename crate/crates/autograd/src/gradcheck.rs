//! Central finite-difference checking of analytic gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Input index and flat element of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare the backward pass of `f` with central differences of step `eps`.
///
/// `f` maps the input leaves to a scalar. At most `max_per_input` evenly
/// spaced entries of each input are probed.
pub fn check_gradients(
    inputs: &[Tensor],
    f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
    eps: f64,
    floor: f64,
    max_per_input: usize,
) -> GradCheck {
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |probe: &[Tensor]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = (n / max_per_input.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    report
}
