//! Central finite-difference oracle for recorded gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// Worst relative error per input between autodiff and finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error of two gradient vectors, `|a-n| / max(|a|, |n|)` taken
/// norm-wise so entries with vanishing gradient do not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Numeric gradient of `f` at `inputs[which]` with step `1e-3 * max(1, |x|)`.
pub fn numeric_gradient(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    which: usize,
) -> Result<Vec<f64>> {
    numeric_gradient_step(f, inputs, which, 1e-3)
}

/// Numeric gradient with step `step * max(1, |x|)`.
pub fn numeric_gradient_step(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    which: usize,
    step: f64,
) -> Result<Vec<f64>> {
    let base = inputs[which].to_vec();
    let shape = inputs[which].shape().to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for i in 0..base.len() {
        let h = step * base[i].abs().max(1.0);
        let mut plus = base.clone();
        plus[i] += h;
        probe[which] = Tensor::from_vec(plus, &shape)?;
        let fp = f(&probe)?.item()?;
        let mut minus = base.clone();
        minus[i] -= h;
        probe[which] = Tensor::from_vec(minus, &shape)?;
        let fm = f(&probe)?.item()?;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Compares `backward` against central differences for every input.
pub fn check_gradients(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
) -> Result<GradCheck> {
    check_gradients_step(f, inputs, 1e-3)
}

/// [`check_gradients`] with a chosen relative step. Small steps keep
/// piecewise-linear activations on one side of their kinks.
pub fn check_gradients_step(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<GradCheck> {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(Tensor::with_grad).collect();
    let loss = f(&leaves)?;
    let grads = loss.backward()?;
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(leaf)
            .map(Tensor::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = numeric_gradient_step(f, inputs, i, step)?;
        max_rel_err.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { max_rel_err })
}
