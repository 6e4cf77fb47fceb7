//! Central finite-difference checks of analytic gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for each input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` per input, in
    /// L2 norm over the input's elements. Inputs whose gradients are both
    /// below `abs_floor` count as exact.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `eps`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    const ABS_FLOOR: f64 = 1e-10;

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let mut grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut num = vec![0.0; inputs[i].numel()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        numeric.push(Tensor::new(inputs[i].shape().to_vec(), num));
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff: f64 = a.data().iter().zip(n.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale = a.norm().max(n.norm());
            if scale < ABS_FLOOR {
                0.0
            } else {
                diff / scale
            }
        })
        .collect();
    GradCheck { rel_errors, analytic, numeric }
}
