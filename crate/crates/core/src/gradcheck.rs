//! Central finite-difference checks of graph gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate(f: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Compare reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`.
pub fn check(f: impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor], eps: f64) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    assert_eq!(g.value(out).numel(), 1, "gradcheck needs a scalar output");
    let grads = g.backward(out);
    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(*v, t);
        let mut numeric = vec![0.0; t.numel()];
        let mut probe = inputs.to_vec();
        for (k, n) in numeric.iter_mut().enumerate() {
            let x0 = t.data()[k];
            probe[i].data_mut()[k] = x0 + eps;
            let hi = evaluate(&f, &probe);
            probe[i].data_mut()[k] = x0 - eps;
            let lo = evaluate(&f, &probe);
            probe[i].data_mut()[k] = x0;
            *n = (hi - lo) / (2.0 * eps);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        relative_errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    GradCheck { relative_errors }
}
